"""Non-sequential session baselines: WRMF (implicit ALS) and BPR, each with
two feedback-aware variants.

Each session is treated as a user.  Variants:

``orig``  every listened track is a positive interaction, skips included.
``bl``    skipped tracks are relabeled as non-preferred before fitting
          (WRMF: target 0 at full confidence; BPR: skips join the negative pool).
``nr``    negatives are mixed across feedback types.  BPR draws each negative
          from the session's skips with probability ratio / (1 + ratio) and
          from unseen items otherwise; WRMF gives skipped tracks target 0 at
          confidence ``1 + weight * ratio / (1 + ratio)``.

The feedback-aware variants follow one-line descriptions only; they are not
reproductions of any published procedure.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .evaluation import compute_metrics, ranks_from_score_matrix, split_targets
from .models.checkpoint import Checkpoint
from .session_data import NUM_RESERVED, HoldoutSplit, Session

log = logging.getLogger(__name__)

VARIANTS = ("orig", "bl", "nr")


@dataclass
class MFParams:
    session_factors: np.ndarray
    item_factors: np.ndarray

    @property
    def factors(self) -> int:
        return self.item_factors.shape[1]

    def copy(self) -> "MFParams":
        return MFParams(self.session_factors.copy(), self.item_factors.copy())


def _check_variant(variant):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def init_mf(n_sessions: int, vocab_size: int, factors: int, seed: int,
            scale: float = 0.01) -> MFParams:
    rng = np.random.Generator(np.random.PCG64(seed))
    x = rng.normal(0.0, scale, (n_sessions, factors))
    y = rng.normal(0.0, scale, (vocab_size, factors))
    y[:NUM_RESERVED] = 0.0
    return MFParams(x, y)


# ---------------------------------------------------------------------------
# WRMF


def wrmf_entries(sessions: list[Session], weight: float, variant: str = "orig",
                 nr_ratio: float = 1.0):
    """Observed (session, item, preference, confidence) entries.  Unobserved
    entries have preference 0 and confidence 1."""
    _check_variant(variant)
    rows, cols, pref, conf = [], [], [], []
    for u, s in enumerate(sessions):
        entries = {}
        for item, skipped in zip(s.items, s.skipped):
            entries.setdefault(item, []).append(skipped)
        for item in sorted(entries):
            flags = entries[item]
            n_pos = sum(not f for f in flags)
            n_skip = len(flags) - n_pos
            if variant == "orig":
                p, c = 1.0, 1.0 + weight * len(flags)
            elif n_pos:
                p, c = 1.0, 1.0 + weight * n_pos
            elif variant == "bl":
                p, c = 0.0, 1.0 + weight * n_skip
            else:
                p, c = 0.0, 1.0 + weight * n_skip * nr_ratio / (1.0 + nr_ratio)
            rows.append(u)
            cols.append(item)
            pref.append(p)
            conf.append(c)
    return (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64),
            np.asarray(pref), np.asarray(conf))


def _csr_pair(rows, cols, pref, conf, shape):
    """Preference and confidence as CSR matrices sharing one structure;
    explicit zero preferences are kept."""
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    indptr = np.zeros(shape[0] + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    P = sparse.csr_matrix((pref[order], cols, indptr), shape=shape)
    C = sparse.csr_matrix((conf[order], cols, indptr), shape=shape)
    return P, C


def wrmf_objective(params: MFParams, entries, reg: float) -> float:
    """sum_ui c_ui (p_ui - x_u . y_i)^2 + reg (|X|^2 + |Y|^2) over all
    session/item pairs, reserved item rows excluded."""
    X, Y = params.session_factors, params.item_factors
    rows, cols, pref, conf = entries
    pred = X @ Y[NUM_RESERVED:].T
    P = np.zeros(pred.shape)
    C = np.ones(pred.shape)
    P[rows, cols - NUM_RESERVED] = pref
    C[rows, cols - NUM_RESERVED] = conf
    return float((C * (P - pred) ** 2).sum() + reg * ((X ** 2).sum() + (Y ** 2).sum()))


def _solve(A, b):
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        log.warning("singular normal equations; applying ridge fallback")
        ridge = 1e-8 * max(np.trace(A) / len(A), 1.0)
        return np.linalg.solve(A + ridge * np.eye(len(A)), b)


def _als_half(fixed, P, C, reg, free_rows):
    """Solve the listed rows of the free factor matrix given the fixed one.
    ``fixed`` must hold zeros on rows that do not take part (reserved items)."""
    f = fixed.shape[1]
    gram = fixed.T @ fixed
    out = np.zeros((P.shape[0], f))
    for u in free_rows:
        lo, hi = C.indptr[u], C.indptr[u + 1]
        idx = C.indices[lo:hi]
        c = C.data[lo:hi]
        p = P.data[lo:hi]
        Yi = fixed[idx]
        A = gram + (Yi.T * (c - 1.0)) @ Yi + reg * np.eye(f)
        b = (Yi.T * c) @ p
        out[u] = _solve(A, b)
    return out


def wrmf_train(sessions: list[Session], vocab_size: int, factors: int = 32, weight: float = 40.0,
               reg: float = 0.01, iterations: int = 15, variant: str = "orig",
               nr_ratio: float = 1.0, seed: int = 0, trace=None) -> MFParams:
    """Alternating least squares.  ``trace`` (a list) receives the objective
    after every half-sweep."""
    _check_variant(variant)
    if not sessions:
        raise ValueError("no interactions")
    entries = wrmf_entries(sessions, weight, variant, nr_ratio)
    rows, cols, pref, conf = entries
    P, C = _csr_pair(rows, cols, pref, conf, (len(sessions), vocab_size))
    Pt, Ct = _csr_pair(cols, rows, pref, conf, (vocab_size, len(sessions)))
    params = init_mf(len(sessions), vocab_size, factors, seed)
    session_rows = range(len(sessions))
    item_rows = range(NUM_RESERVED, vocab_size)
    for _ in range(iterations):
        params.session_factors = _als_half(params.item_factors, P, C, reg, session_rows)
        if trace is not None:
            trace.append(wrmf_objective(params, entries, reg))
        params.item_factors = _als_half(params.session_factors, Pt, Ct, reg, item_rows)
        if trace is not None:
            trace.append(wrmf_objective(params, entries, reg))
    return params


def fold_in(item_factors: np.ndarray, items, reg: float = 0.01, weight: float = 40.0) -> np.ndarray:
    """Least-squares session factor for an unseen session from its items."""
    f = item_factors.shape[1]
    items = np.asarray(list(items), dtype=np.int64)
    gram = item_factors.T @ item_factors
    if len(items) == 0:
        return np.zeros(f)
    Yi = item_factors[items]
    A = gram + weight * Yi.T @ Yi + reg * np.eye(f)
    b = (1.0 + weight) * Yi.sum(axis=0)
    return _solve(A, b)


# ---------------------------------------------------------------------------
# BPR


def bpr_triple_loss(x_hat):
    """-ln sigma(x_hat), stable for large |x_hat|."""
    return np.logaddexp(0.0, -np.asarray(x_hat, dtype=np.float64))


def bpr_triple_grad(x_hat):
    """d/dx of -ln sigma(x) = -sigma(-x)."""
    return -0.5 * (1.0 - np.tanh(0.5 * np.asarray(x_hat, dtype=np.float64)))


def bpr_loss(params: MFParams, triples, reg: float) -> float:
    """Sum of -ln sigma(x_u . (y_i - y_j)) plus L2 on the touched factors."""
    t = np.asarray(triples, dtype=np.int64)
    X, Y = params.session_factors, params.item_factors
    xu, yi, yj = X[t[:, 0]], Y[t[:, 1]], Y[t[:, 2]]
    x_hat = (xu * (yi - yj)).sum(axis=1)
    l2 = (xu ** 2).sum() + (yi ** 2).sum() + (yj ** 2).sum()
    return float(bpr_triple_loss(x_hat).sum() + reg * l2)


def bpr_grad(params: MFParams, triples, reg: float) -> MFParams:
    t = np.asarray(triples, dtype=np.int64)
    X, Y = params.session_factors, params.item_factors
    gX, gY = np.zeros_like(X), np.zeros_like(Y)
    xu, yi, yj = X[t[:, 0]], Y[t[:, 1]], Y[t[:, 2]]
    g = bpr_triple_grad((xu * (yi - yj)).sum(axis=1))[:, None]
    np.add.at(gX, t[:, 0], g * (yi - yj) + 2 * reg * xu)
    np.add.at(gY, t[:, 1], g * xu + 2 * reg * yi)
    np.add.at(gY, t[:, 2], -g * xu + 2 * reg * yj)
    return MFParams(gX, gY)


def _positive_pairs(sessions, variant):
    pairs = []
    for u, s in enumerate(sessions):
        for item, skipped in zip(s.items, s.skipped):
            if variant == "orig" or not skipped:
                pairs.append((u, item))
    return pairs


def _draw_unseen(rng, vocab_size, seen):
    while True:
        j = NUM_RESERVED + int(rng.integers(vocab_size - NUM_RESERVED))
        if j not in seen:
            return j


def _draw_negative_bl(rng, vocab_size, seen, skips):
    # skipped tracks count as negatives alongside unseen items
    pool = vocab_size - NUM_RESERVED - len(seen) + len(skips)
    if skips and rng.random() < len(skips) / max(pool, 1):
        return skips[int(rng.integers(len(skips)))]
    return _draw_unseen(rng, vocab_size, seen)


def _draw_negative_nr(rng, vocab_size, seen, skips, ratio):
    if skips and rng.random() < ratio / (1.0 + ratio):
        return skips[int(rng.integers(len(skips)))]
    return _draw_unseen(rng, vocab_size, seen)


def bpr_train(sessions: list[Session], vocab_size: int, factors: int = 32, lr: float = 0.05,
              reg: float = 0.01, epochs: int = 20, variant: str = "orig", nr_ratio: float = 1.0,
              seed: int = 0) -> MFParams:
    """SGD on ln sigma(x_u . (y_i - y_j)), one sampled negative per positive."""
    _check_variant(variant)
    rng = np.random.Generator(np.random.PCG64(seed))
    params = init_mf(len(sessions), vocab_size, factors, seed)
    X, Y = params.session_factors, params.item_factors
    pairs = _positive_pairs(sessions, variant)
    if not pairs:
        raise ValueError("no positive interactions to build triples from")
    seen = [set(s.items) for s in sessions]
    positives = [set(i for i, f in zip(s.items, s.skipped) if variant == "orig" or not f)
                 for s in sessions]
    skips = [sorted(set(s.items) - positives[u]) for u, s in enumerate(sessions)]
    for _ in range(epochs):
        for k in rng.permutation(len(pairs)):
            u, i = pairs[k]
            if variant == "orig":
                j = _draw_unseen(rng, vocab_size, seen[u])
            elif variant == "bl":
                j = _draw_negative_bl(rng, vocab_size, seen[u], skips[u])
            else:
                j = _draw_negative_nr(rng, vocab_size, seen[u], skips[u], nr_ratio)
            xu, yi, yj = X[u].copy(), Y[i].copy(), Y[j].copy()
            g = -bpr_triple_grad(xu @ (yi - yj))  # sigma(-x_hat)
            X[u] += lr * (g * (yi - yj) - reg * xu)
            Y[i] += lr * (g * xu - reg * yi)
            Y[j] += lr * (-g * xu - reg * yj)
    return params


# ---------------------------------------------------------------------------
# ranking and evaluation


def baseline_scores(params: MFParams, session_factor: np.ndarray) -> np.ndarray:
    return params.item_factors[NUM_RESERVED:] @ session_factor


def baseline_rank(params: MFParams, session, target: int, reg: float = 0.01,
                  weight: float = 40.0) -> int:
    """Rank of ``target`` among all real items.  ``session`` is either a
    training-session id (factor lookup) or an item sequence (fold-in)."""
    if isinstance(session, (int, np.integer)):
        xu = params.session_factors[int(session)]
    else:
        xu = fold_in(params.item_factors, session, reg, weight)
    scores = baseline_scores(params, xu)
    return int(ranks_from_score_matrix(scores[None], np.array([target - NUM_RESERVED]))[0])


def to_checkpoint(params: MFParams, config: dict, vocab_hash: str, meta=None) -> Checkpoint:
    return Checkpoint("baseline", config, vocab_hash,
                      {"session_factors": params.session_factors,
                       "item_factors": params.item_factors}, meta or {})


def from_checkpoint(ckpt: Checkpoint) -> MFParams:
    return MFParams(ckpt.tensors["session_factors"], ckpt.tensors["item_factors"])


def evaluate_baseline(ckpt: Checkpoint, splits: list[HoldoutSplit], which: str = "test"):
    """Sessions are scored with their trained factor (session id = position in
    the dataset)."""
    params = from_checkpoint(ckpt)
    _, targets, skipped = split_targets(splits, which)
    scores = params.session_factors[:len(splits)] @ params.item_factors[NUM_RESERVED:].T
    ranks = ranks_from_score_matrix(scores, np.asarray(targets) - NUM_RESERVED)
    return compute_metrics(ranks[~skipped], ranks[skipped])


def train_baseline(algorithm: str, splits: list[HoldoutSplit], vocab_size: int, **kwargs) -> MFParams:
    sessions = [sp.train_prefix for sp in splits]
    if algorithm == "wrmf":
        return wrmf_train(sessions, vocab_size, **kwargs)
    if algorithm == "bpr":
        return bpr_train(sessions, vocab_size, **kwargs)
    raise ValueError(f"unknown baseline {algorithm!r}")
