"""Synthetic listening sessions with a planted, recoverable taste structure.

Every catalog item gets a unit-norm Gaussian latent factor.  Each session draws
a unit-norm taste vector; at each step the next track is drawn either from a
softmax over taste affinity (probability ``coherence``) or uniformly from the
catalog.  A track is marked skipped iff its cosine affinity to the session's
taste falls below ``skip_threshold``.  Tracks do not repeat within a session.

All randomness comes from :class:`skiprec.rng.Xoshiro256`, so a seed pins the
dataset exactly.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .rng import Xoshiro256
from .session_data import NUM_RESERVED, ConfigError, Dataset, Session, Vocabulary


@dataclass(frozen=True)
class SyntheticConfig:
    catalog_size: int = 500
    latent_dim: int = 4
    sessions: int = 2000
    session_length_range: tuple[int, int] = (5, 20)
    skip_threshold: float = 0.7
    coherence: float = 0.6
    temperature: float = 0.1
    seed: int = 0

    def validate(self):
        lo, hi = self.session_length_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid session_length_range {self.session_length_range}")
        if self.catalog_size < hi:
            raise ConfigError(
                f"catalog_size {self.catalog_size} smaller than session length {hi}")
        if not 0.0 <= self.coherence <= 1.0:
            raise ConfigError("coherence must lie in [0, 1]")
        if self.latent_dim < 1 or self.sessions < 0:
            raise ConfigError("latent_dim must be >= 1 and sessions >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")


@dataclass
class GroundTruth:
    """Latent item factors (rows indexed by catalog position, i.e. item index
    minus the reserved offset) and per-session taste vectors."""

    item_factors: np.ndarray
    tastes: np.ndarray

    def save(self, path: str | os.PathLike) -> None:
        np.savez(path, item_factors=self.item_factors, tastes=self.tastes)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "GroundTruth":
        with np.load(path) as z:
            return cls(z["item_factors"], z["tastes"])


def _unit_gaussian(rng: Xoshiro256, dim: int) -> np.ndarray:
    while True:
        v = np.array([rng.normal() for _ in range(dim)])
        norm = math.sqrt(float(np.dot(v, v)))
        if norm > 0.0:
            return v / norm


def generate_dataset(config: SyntheticConfig) -> tuple[list[Session], GroundTruth]:
    config.validate()
    rng = Xoshiro256(config.seed)
    n, dim = config.catalog_size, config.latent_dim
    factors = np.stack([_unit_gaussian(rng, dim) for _ in range(n)])

    lo, hi = config.session_length_range
    sessions, tastes = [], []
    for _ in range(config.sessions):
        taste = _unit_gaussian(rng, dim)
        tastes.append(taste)
        affinity = factors @ taste
        weights = np.exp((affinity - affinity.max()) / config.temperature)
        length = lo + rng.integer(hi - lo + 1)

        chosen: list[int] = []
        used = np.zeros(n, dtype=bool)
        for _ in range(length):
            if rng.uniform() < config.coherence:
                w = np.where(used, 0.0, weights)
                cdf = np.cumsum(w)
                k = int(np.searchsorted(cdf, rng.uniform() * cdf[-1], side="right"))
                k = min(k, n - 1)
                while used[k]:  # guard against a zero-weight boundary hit
                    k = (k + 1) % n
            else:
                k = rng.integer(n)
                while used[k]:
                    k = rng.integer(n)
            used[k] = True
            chosen.append(k)
        items = [k + NUM_RESERVED for k in chosen]
        skipped = [bool(affinity[k] < config.skip_threshold) for k in chosen]
        sessions.append(Session(items, skipped))

    tastes_arr = np.stack(tastes) if tastes else np.zeros((0, dim))
    return sessions, GroundTruth(factors, tastes_arr)


def synthetic_vocabulary(catalog_size: int) -> Vocabulary:
    width = len(str(max(catalog_size - 1, 0)))
    return Vocabulary([f"syn{k:0{width}d}" for k in range(catalog_size)])


def make_dataset(config: SyntheticConfig) -> tuple[Dataset, GroundTruth]:
    sessions, truth = generate_dataset(config)
    settings = {"synthetic": {k: (list(v) if isinstance(v, tuple) else v)
                              for k, v in asdict(config).items()}}
    return Dataset(sessions, synthetic_vocabulary(config.catalog_size), settings), truth


def save_synthetic(dataset: Dataset, truth: GroundTruth, directory: str | os.PathLike) -> None:
    dataset.save(directory)
    truth.save(os.path.join(directory, "ground_truth.npz"))


def oracle_rank(truth: GroundTruth, taste: np.ndarray, candidates=None) -> list[int]:
    """Candidates (catalog positions) ordered by descending cosine affinity to
    ``taste``; ties go to the lower index."""
    if candidates is None:
        candidates = range(len(truth.item_factors))
    candidates = np.asarray(list(candidates), dtype=np.int64)
    f = truth.item_factors[candidates]
    norms = np.linalg.norm(f, axis=1) * np.linalg.norm(taste)
    aff = np.divide(f @ taste, norms, out=np.zeros(len(candidates)), where=norms > 0)
    order = np.lexsort((candidates, -aff))
    return [int(c) for c in candidates[order]]


def pairwise_accuracy(score_fn, truth: GroundTruth, session_ids, pairs_per_session: int = 20,
                      seed: int = 0) -> float:
    """Fraction of random item pairs whose score order agrees with the planted
    affinity order, averaged over the given sessions.

    ``score_fn(session_id)`` returns scores for every catalog position."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n = len(truth.item_factors)
    agree = total = 0
    for sid in session_ids:
        scores = np.asarray(score_fn(sid))
        aff = truth.item_factors @ truth.tastes[sid]
        a = rng.integers(0, n, size=pairs_per_session)
        b = rng.integers(0, n, size=pairs_per_session)
        keep = aff[a] != aff[b]
        a, b = a[keep], b[keep]
        agree += int(np.sum(np.sign(scores[a] - scores[b]) == np.sign(aff[a] - aff[b])))
        total += len(a)
    return agree / total if total else float("nan")

