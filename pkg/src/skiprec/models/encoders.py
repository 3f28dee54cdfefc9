"""Sequence encoders mapping a session prefix to predicted next-item
embeddings, all sharing (tied) the item embedding matrix as output head.

Architectures
-------------
``recurrent``               single GRU layer, prediction = hidden state
``convolutional``           per-position Caser over the most recent window
``causal-attention``        SASRec-style pre-LN blocks with a causal mask
``bidirectional-attention`` BERT4Rec-style blocks, masked-item training and an
                            end token appended at inference

Token sequences are right-padded with index 0.  Parameters live in a flat
``dict[str, np.ndarray]``; gradients use the same keys.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse

from ..session_data import END, MASK, NUM_RESERVED, PAD
from . import layers

ARCHITECTURES = ("recurrent", "convolutional", "causal-attention", "bidirectional-attention")
ALIASES = {
    "gru4rec": "recurrent",
    "gru": "recurrent",
    "caser": "convolutional",
    "sasrec": "causal-attention",
    "bert4rec": "bidirectional-attention",
}

INIT_BOUND = 0.02


def resolve_architecture(name: str) -> str:
    name = ALIASES.get(name.lower(), name.lower())
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {name!r}")
    return name


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "causal-attention"
    embed_dim: int = 32
    max_len: int = 20
    blocks: int = 2
    heads: int = 8
    mask_prob: float = 0.2
    vocab_size: int = 0
    caser_window: int = 5
    caser_h_filters: int = 4
    caser_v_filters: int = 4

    def __post_init__(self):
        object.__setattr__(self, "architecture", resolve_architecture(self.architecture))
        if self.is_attention and self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must lie in [0, 1]")
        if self.max_len < 1 or self.embed_dim < 1:
            raise ValueError("max_len and embed_dim must be positive")

    @property
    def is_attention(self) -> bool:
        return self.architecture in ("causal-attention", "bidirectional-attention")

    @property
    def is_bidirectional(self) -> bool:
        return self.architecture == "bidirectional-attention"

    @property
    def caser_heights(self) -> tuple[int, ...]:
        return tuple(range(1, self.caser_window + 1))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderOutput:
    """Predicted embeddings, one row per prediction.  ``positions`` gives the
    input position each row was read from."""

    predicted: np.ndarray
    positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


# ---------------------------------------------------------------------------
# initialization


def truncated_normal(rng: np.random.Generator, shape, bound: float = INIT_BOUND,
                     sigma: float = 1.0) -> np.ndarray:
    """N(0, sigma^2) restricted to [-bound, bound] by rejection."""
    n = int(np.prod(shape, dtype=np.int64))
    out = np.empty(n)
    filled = 0
    accept = max(float(np.mean(np.abs(rng.standard_normal(4096) * sigma) <= bound)), 1e-3)
    while filled < n:
        need = n - filled
        draw = rng.standard_normal(int(need / accept * 1.2) + 16) * sigma
        keep = draw[np.abs(draw) <= bound][:need]
        out[filled:filled + len(keep)] = keep
        filled += len(keep)
    return out.reshape(shape)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, V = config.embed_dim, config.vocab_size
    if V <= NUM_RESERVED:
        raise ValueError("vocab_size must include at least one real item")
    shapes: dict[str, tuple[int, ...]] = {"item_emb": (V, d)}
    arch = config.architecture
    if config.is_attention:
        n_pos = config.max_len + 1 if config.is_bidirectional else config.max_len
        shapes["pos_emb"] = (n_pos, d)
        for b in range(config.blocks):
            pre = f"blk{b}."
            for ln in ("ln1", "ln2"):
                shapes[pre + ln + ".g"] = (d,)
                shapes[pre + ln + ".b"] = (d,)
            for name in ("q", "k", "v", "o"):
                shapes[pre + "attn.w" + name] = (d, d)
                shapes[pre + "attn.b" + name] = (d,)
            shapes[pre + "ffn.w1"] = (d, d)
            shapes[pre + "ffn.b1"] = (d,)
            shapes[pre + "ffn.w2"] = (d, d)
            shapes[pre + "ffn.b2"] = (d,)
        shapes["ln_f.g"] = (d,)
        shapes["ln_f.b"] = (d,)
    elif arch == "recurrent":
        shapes.update({"gru.wx": (d, 3 * d), "gru.wh": (d, 3 * d),
                       "gru.bx": (3 * d,), "gru.bh": (3 * d,)})
    else:
        W, nh, nv = config.caser_window, config.caser_h_filters, config.caser_v_filters
        for h in config.caser_heights:
            shapes[f"cnn.h{h}.w"] = (nh, h, d)
            shapes[f"cnn.h{h}.b"] = (nh,)
        shapes["cnn.v.w"] = (nv, W)
        shapes["cnn.v.b"] = (nv,)
        n_feat = nh * len(config.caser_heights) + nv * d
        shapes.update({"cnn.fc.w": (n_feat, d), "cnn.fc.b": (d,),
                       "cnn.out.w": (d, d), "cnn.out.b": (d,)})
    return shapes


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Every parameter drawn from N(0, 1) truncated to [-0.02, 0.02]."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return {name: truncated_normal(rng, shape) for name, shape in param_shapes(config).items()}


# ---------------------------------------------------------------------------
# batched forward / backward


def _sub(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def forward(params, config: ModelConfig, tokens: np.ndarray):
    """Encode a right-padded (B, L) token batch into (B, L, d) outputs.

    Causal architectures: row t sees tokens 0..t.  Bidirectional: every real
    row sees every real token.  Padding tokens are never attended to and
    embed as zero vectors."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError("tokens must be a 2-D (batch, length) array")
    B, L = tokens.shape
    V = params["item_emb"].shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        raise IndexError("token index outside vocabulary")
    n_pos = params["pos_emb"].shape[0] if "pos_emb" in params else config.max_len
    if L > n_pos:
        raise ValueError(f"sequence length {L} exceeds maximum {n_pos}")
    arch = config.architecture
    real = tokens != PAD
    emb = params["item_emb"][tokens] * real[..., None]

    if config.is_attention:
        scale = np.sqrt(config.embed_dim)
        x = emb * scale + params["pos_emb"][:L][None] * real[..., None]
        allowed = np.broadcast_to(real[:, None, :], (B, L, L))
        if not config.is_bidirectional:
            allowed = allowed & np.tril(np.ones((L, L), dtype=bool))[None]
        allowed = allowed | np.eye(L, dtype=bool)[None]  # padded rows keep one key
        act = "gelu" if config.is_bidirectional else "relu"
        caches = []
        for b in range(config.blocks):
            x, c = layers.block_forward(x, _sub(params, f"blk{b}."), config.heads, allowed, act)
            caches.append(c)
        out, ln_c = layers.layernorm_forward(x, params["ln_f.g"], params["ln_f.b"])
        cache = (tokens, real, caches, ln_c, scale)
    elif arch == "recurrent":
        out, c = layers.gru_forward(emb, _sub(params, "gru."))
        cache = (tokens, real, c)
    else:
        out, c = layers.caser_forward(emb, _sub(params, "cnn."), config.caser_window,
                                      config.caser_heights)
        cache = (tokens, real, c)
    return out, cache


def backward(params, config: ModelConfig, cache, dout) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. every parameter given dL/d(outputs)."""
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    arch = config.architecture
    tokens, real = cache[0], cache[1]
    if config.is_attention:
        _, _, caches, ln_c, scale = cache
        dx, g = layers.layernorm_backward(dout, ln_c)
        grads["ln_f.g"] += g["g"]
        grads["ln_f.b"] += g["b"]
        for b in range(config.blocks - 1, -1, -1):
            pre = f"blk{b}."
            dx, g = layers.block_backward(dx, _sub(params, pre), caches[b])
            for k, v in g.items():
                grads[pre + k] += v
        dx = dx * real[..., None]
        L = tokens.shape[1]
        grads["pos_emb"][:L] += dx.sum(axis=0)
        demb = dx * scale
    elif arch == "recurrent":
        demb, g = layers.gru_backward(dout, _sub(params, "gru."), cache[2])
        for k, v in g.items():
            grads["gru." + k] += v
    else:
        demb, g = layers.caser_backward(dout, _sub(params, "cnn."), cache[2])
        for k, v in g.items():
            grads["cnn." + k] += v
    demb = demb * real[..., None]
    n = tokens.size
    sel = sparse.csr_matrix((np.ones(n), (tokens.ravel(), np.arange(n))),
                            shape=(grads["item_emb"].shape[0], n))
    grads["item_emb"] += sel @ demb.reshape(n, -1)
    return grads


# ---------------------------------------------------------------------------
# single-session API


def encode(params, config: ModelConfig, prefix, training_mode: bool = False,
           masked_positions=None) -> EncoderOutput:
    """Predicted embeddings for one session prefix.

    Causal architectures return one row per input position; row t predicts
    the item following position t.  The bidirectional encoder at inference
    appends the end token and returns its single output row; in training mode
    ``masked_positions`` (from ``training.mask_sequence``) are replaced by the
    mask token and one row per masked position is returned, followed by the
    end-token row."""
    items = np.asarray(prefix, dtype=np.int64)
    if items.ndim != 1 or len(items) == 0:
        raise ValueError("prefix must be a non-empty 1-D sequence")
    if len(items) > config.max_len:
        raise ValueError(f"prefix length {len(items)} exceeds max_len {config.max_len}")
    V = params["item_emb"].shape[0]
    if items.min() < NUM_RESERVED or items.max() >= V:
        raise IndexError("prefix contains an index outside the real-item range")

    if not config.is_bidirectional:
        out, _ = forward(params, config, items[None])
        return EncoderOutput(out[0], np.arange(len(items)))

    tokens = items.copy()
    rows = []
    if training_mode:
        masked = sorted(int(u) for u in (masked_positions if masked_positions is not None else ()))
        tokens[masked] = MASK
        rows = list(masked)
    tokens = np.append(tokens, END)
    rows.append(len(tokens) - 1)
    out, _ = forward(params, config, tokens[None])
    rows = np.asarray(rows, dtype=np.int64)
    return EncoderOutput(out[0, rows], rows)


def score_items(predicted, item_emb, candidates) -> np.ndarray:
    """Inner-product scores of one predicted embedding against candidate rows
    of the item embedding matrix, in candidate order."""
    candidates = np.asarray(candidates, dtype=np.int64)
    return item_emb[candidates] @ np.asarray(predicted)
