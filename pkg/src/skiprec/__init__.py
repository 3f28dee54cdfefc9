"""Session-based music recommendation with a skip-aware contrastive objective."""

__version__ = "0.1.0"
