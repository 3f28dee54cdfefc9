"""Training objective: sampled-softmax NLL on the next item plus a skip-aware
InfoNCE term over cosine similarity.

    L = alpha * L_nll + beta * L_nce

For a prediction row with predicted embedding e and next-positive item p:

    L_nll = -log( exp(<e, p>) / (exp(<e, p>) + sum_s exp(<e, s>)) )
    L_nce = -log( exp(cos(p, e)) / (exp(cos(p, e)) + sum_n exp(cos(n, e))) )

where ``s`` ranges over the uniformly sampled unseen items of the session and
``n`` over the skipped items of the session (or, with the ``between`` scope,
only the skips between the current position and its next positive).

The contrastive term always targets the next positive item.  The NLL target
is configurable: ``next-positive`` (default) uses the same item, while
``next-item`` uses the immediately following item whether or not it was
skipped, which is what a feedback-agnostic model is trained on.  Each term is
averaged per session over the rows that have a target for it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .models import encoders
from .session_data import END, MASK, NUM_RESERVED, PAD

SCOPES = ("all-session-skips", "between-next-positive")
NLL_TARGETS = ("next-positive", "next-item")


class NumericError(FloatingPointError):
    def __init__(self, message: str, batch_id=None):
        super().__init__(message if batch_id is None else f"batch {batch_id}: {message}")
        self.batch_id = batch_id


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.5
    num_negatives: int = 1000
    nce_negative_scope: str = "all-session-skips"
    nll_target: str = "next-positive"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.num_negatives < 1:
            raise ValueError("num_negatives must be >= 1")
        if self.nce_negative_scope not in SCOPES:
            raise ValueError(f"nce_negative_scope must be one of {SCOPES}")
        if self.nll_target not in NLL_TARGETS:
            raise ValueError(f"nll_target must be one of {NLL_TARGETS}")


@dataclass(frozen=True)
class LossBreakdown:
    nll: float
    nce: float
    combined: float
    positions: int


# ---------------------------------------------------------------------------
# negatives


def sample_negatives(vocab_size: int, session_items, n: int, rng: np.random.Generator):
    """Draw ``n`` distinct real items absent from the session, uniformly
    without replacement.  Returns ``(indices, short)`` where ``short`` is True
    when fewer than ``n`` items were eligible and the whole eligible set was
    returned instead."""
    present = np.zeros(vocab_size, dtype=bool)
    present[:NUM_RESERVED] = True
    present[np.asarray(session_items, dtype=np.int64)] = True
    eligible = np.flatnonzero(~present)
    if len(eligible) <= n:
        return eligible, len(eligible) < n
    return rng.choice(eligible, size=n, replace=False), False


# ---------------------------------------------------------------------------
# scalar reference terms


def nll_sampled_softmax(target_score: float, negative_scores) -> float:
    negs = [float(s) for s in negative_scores]
    top = max([target_score] + negs)
    if target_score >= top:
        return math.log1p(math.fsum(math.exp(s - target_score) for s in negs))
    total = math.fsum(math.exp(s - top) for s in [target_score] + negs)
    return (top - target_score) + math.log(total)


def cosine(a, b) -> float:
    """Cosine similarity; 0 when either vector has zero norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def info_nce(predicted, positive, negatives) -> float:
    """Per-row InfoNCE with f(a, b) = exp(cos(a, b)).  The negative sum is
    exactly rounded, so any ordering of ``negatives`` gives the same bits.
    log1p is only more accurate for small sums; above 1 the plain logarithm
    of ``1 + s`` is the better-rounded of the two."""
    cp = cosine(positive, predicted)
    s = math.fsum(math.exp(cosine(n, predicted) - cp) for n in negatives)
    return math.log1p(s) if s < 1.0 else math.log(1.0 + s)


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    """A padded batch of sessions ready for the encoder and the loss.

    tokens     encoder input ids (B, L)
    labels     original item per position, 0 on padding (B, L)
    skipped    skip flag per position (B, L)
    rows       which output rows are predictions (B, L)
    anchors    for each row, the position after which the next positive is
               the target (B, L); row t of a causal model has anchor t
    negatives  sampled NLL negatives per session, 0-padded (B, N)
    """

    tokens: np.ndarray
    labels: np.ndarray
    skipped: np.ndarray
    rows: np.ndarray
    anchors: np.ndarray
    negatives: np.ndarray
    batch_id: object = None

    def __post_init__(self):
        B, L = self.labels.shape
        self.targets = np.full((B, L), -1, dtype=np.int64)
        positive = (self.labels != PAD) & ~self.skipped
        for b in range(B):
            nxt = -1
            firsts = np.full(L + 1, -1, dtype=np.int64)  # firsts[j]: first positive >= j
            for j in range(L - 1, -1, -1):
                if positive[b, j]:
                    nxt = j
                firsts[j] = nxt
            for r in np.flatnonzero(self.rows[b]):
                a = self.anchors[b, r]
                self.targets[b, r] = firsts[a + 1] if a + 1 <= L else -1
        self.contributing = self.rows & (self.targets >= 0)
        nxt = self.anchors + 1
        inside = nxt < L
        self.next_items = np.where(inside, nxt, -1)
        has_next = np.zeros((B, L), dtype=bool)
        has_next[inside] = self.labels[np.nonzero(inside)[0], nxt[inside]] != PAD
        self.next_items[~(self.rows & has_next)] = -1

    def nll_targets(self, mode: str = "next-positive") -> np.ndarray:
        """Target position of the NLL term per row, -1 where there is none."""
        if mode == "next-positive":
            return self.targets
        if mode == "next-item":
            return self.next_items
        raise ValueError(f"unknown NLL target {mode!r}")

    def has_rows(self, config: "LossConfig") -> bool:
        return bool(self.contributing.any() or (self.nll_targets(config.nll_target) >= 0).any())

    @property
    def neg_mask(self) -> np.ndarray:
        return self.negatives != PAD

    def nce_mask(self, scope: str) -> np.ndarray:
        """(B, L, L) mask: [b, r, j] marks position j as an NCE negative of row r."""
        B, L = self.labels.shape
        skip = self.skipped & (self.labels != PAD)
        mask = np.broadcast_to(skip[:, None, :], (B, L, L)).copy()
        if scope == "between-next-positive":
            j = np.arange(L)[None, None, :]
            mask &= (j > self.anchors[:, :, None]) & (j < self.targets[:, :, None])
        mask &= self.contributing[:, :, None]
        return mask


def causal_batch(sessions, negatives, batch_id=None) -> Batch:
    """Batch for causal encoders: every position predicts its next positive."""
    B = len(sessions)
    L = max(len(s) for s in sessions)
    labels = np.zeros((B, L), dtype=np.int64)
    skipped = np.zeros((B, L), dtype=bool)
    for b, s in enumerate(sessions):
        labels[b, :len(s)] = s.items
        skipped[b, :len(s)] = s.skipped
    anchors = np.broadcast_to(np.arange(L), (B, L)).copy()
    return Batch(labels.copy(), labels, skipped, labels != PAD, anchors,
                 _pad_negatives(negatives), batch_id)


def masked_batch(sessions, masked_positions, negatives, batch_id=None) -> Batch:
    """Batch for the bidirectional encoder.  For a session of length K the
    first K-1 items form the context (masked at ``masked_positions``) and the
    end token occupies position K-1.  Masked position u and the end-token row
    both predict the first positive at or after their own position."""
    B = len(sessions)
    L = max(len(s) for s in sessions)
    labels = np.zeros((B, L), dtype=np.int64)
    skipped = np.zeros((B, L), dtype=bool)
    tokens = np.zeros((B, L), dtype=np.int64)
    rows = np.zeros((B, L), dtype=bool)
    for b, s in enumerate(sessions):
        K = len(s)
        labels[b, :K] = s.items
        skipped[b, :K] = s.skipped
        tokens[b, :K - 1] = s.items[:K - 1]
        tokens[b, K - 1] = END
        for u in masked_positions[b]:
            if not 0 <= u < K - 1:
                raise ValueError(f"masked position {u} outside context of length {K - 1}")
            tokens[b, u] = MASK
            rows[b, u] = True
        rows[b, K - 1] = True
    anchors = np.broadcast_to(np.arange(L) - 1, (B, L)).copy()
    return Batch(tokens, labels, skipped, rows, anchors, _pad_negatives(negatives), batch_id)


def _pad_negatives(negatives) -> np.ndarray:
    width = max((len(n) for n in negatives), default=0)
    out = np.zeros((len(negatives), max(width, 1)), dtype=np.int64)
    for b, n in enumerate(negatives):
        out[b, :len(n)] = n
    return out


# ---------------------------------------------------------------------------
# batched loss and gradients


def scatter_add(target, index, values):
    """``target[index] += values`` with repeated indices accumulated."""
    n = len(index)
    sel = sparse.csr_matrix((np.ones(n), (index, np.arange(n))), shape=(target.shape[0], n))
    target += sel @ values


def _row_weights(contrib: np.ndarray, reduction: str) -> np.ndarray:
    if reduction == "sum":
        return contrib.astype(np.float64)
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    per_session = contrib.sum(axis=1)
    active = per_session > 0
    w = np.zeros(contrib.shape)
    w[active] = contrib[active] / per_session[active, None] / active.sum()
    return w


def _normalize(x):
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, x / safe, 0.0), safe, norm > 0


def _normalize_backward(du, u, norm, nonzero):
    return np.where(nonzero, (du - u * (u * du).sum(axis=-1, keepdims=True)) / norm, 0.0)


def loss_from_outputs(H, item_emb, batch: Batch, config: LossConfig, reduction="mean",
                      need_grad=True):
    """Loss on encoder outputs ``H`` (B, L, d).  Returns the breakdown and,
    if requested, (dL/dH, dL/d item_emb) for the combined loss."""
    contrib = batch.contributing
    nll_tgt = batch.nll_targets(config.nll_target)
    nll_contrib = nll_tgt >= 0
    n_pos = int(nll_contrib.sum())
    if n_pos == 0 and not contrib.any():
        raise ValueError("batch has no prediction row with a target")
    w = _row_weights(contrib, reduction)
    wn = w if nll_tgt is batch.targets else _row_weights(nll_contrib, reduction)
    B, L, d = H.shape
    tgt_pos = np.where(batch.targets >= 0, batch.targets, 0)
    nll_pos = np.where(nll_contrib, nll_tgt, 0)
    tgt_item = np.take_along_axis(batch.labels, nll_pos, axis=1)
    Mt = item_emb[tgt_item]  # (B, L, d)

    # sampled softmax
    neg_mask = batch.neg_mask
    Mn = item_emb[batch.negatives]  # (B, N, d)
    s_t = (H * Mt).sum(-1)
    s_n = H @ Mn.transpose(0, 2, 1)
    s_n = np.where(neg_mask[:, None, :], s_n, -np.inf)
    top = np.maximum(s_t, s_n.max(axis=-1))
    e_t = np.exp(s_t - top)
    e_n = np.exp(s_n - top[..., None])
    z = e_t + e_n.sum(-1)
    nll_rows = np.where(nll_contrib, np.log(z) + top - s_t, 0.0)

    # InfoNCE on cosine similarity
    nce_mask = batch.nce_mask(config.nce_negative_scope)
    E = item_emb[batch.labels]
    u, hn, hnz = _normalize(H)
    e, en, enz = _normalize(E)
    C = u @ e.transpose(0, 2, 1)
    cos_t = np.take_along_axis(C, tgt_pos[..., None], axis=2)[..., 0]
    ex = np.where(nce_mask, np.exp(C - cos_t[..., None]), 0.0)
    S = ex.sum(-1)
    nce_rows = np.where(contrib, np.log1p(S), 0.0)

    nll = float((wn * nll_rows).sum())
    nce = float((w * nce_rows).sum())
    combined = config.alpha * nll + config.beta * nce
    if not np.isfinite(combined):
        raise NumericError("non-finite loss", batch.batch_id)
    breakdown = LossBreakdown(nll, nce, combined, n_pos)
    if not need_grad:
        return breakdown, None, None

    dM = np.zeros_like(item_emb)
    a = config.alpha * wn
    p_t = e_t / z
    p_n = e_n / z[..., None]
    g_t = a * (p_t - 1.0)  # (B, L)
    g_n = a[..., None] * p_n  # (B, L, N)
    dH = g_t[..., None] * Mt + g_n @ Mn
    scatter_add(dM, tgt_item.ravel(), (g_t[..., None] * H).reshape(-1, d))
    scatter_add(dM, batch.negatives.ravel(), (g_n.transpose(0, 2, 1) @ H).reshape(-1, d))

    if config.beta:
        bw = config.beta * w
        q = ex / (1.0 + S)[..., None]  # dnce/dC_j
        dC = bw[..., None] * q
        dcos_t = bw * (-S / (1.0 + S))
        np.put_along_axis(dC, tgt_pos[..., None],
                          np.take_along_axis(dC, tgt_pos[..., None], axis=2) + dcos_t[..., None],
                          axis=2)
        du = dC @ e
        de = dC.transpose(0, 2, 1) @ u
        dH += _normalize_backward(du, u, hn, hnz)
        dE = _normalize_backward(de, e, en, enz)
        scatter_add(dM, batch.labels.ravel(), dE.reshape(-1, d))
    return breakdown, dH, dM


def combined_loss(params, model_config, batch: Batch, config: LossConfig,
                  reduction: str = "mean") -> LossBreakdown:
    H, _ = encoders.forward(params, model_config, batch.tokens)
    breakdown, _, _ = loss_from_outputs(H, params["item_emb"], batch, config, reduction,
                                        need_grad=False)
    return breakdown


def loss_and_grad(params, model_config, batch: Batch, config: LossConfig,
                  reduction: str = "mean"):
    """Combined loss and its exact gradient w.r.t. every parameter."""
    H, cache = encoders.forward(params, model_config, batch.tokens)
    breakdown, dH, dM = loss_from_outputs(H, params["item_emb"], batch, config, reduction)
    grads = encoders.backward(params, model_config, cache, dH)
    grads["item_emb"] += dM
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}", batch.batch_id)
    return breakdown, grads


def reference_loss(params, model_config, batch: Batch, config: LossConfig,
                   reduction: str = "mean") -> LossBreakdown:
    """Row-by-row recomputation with the scalar terms above (slow; for tests)."""
    H, _ = encoders.forward(params, model_config, batch.tokens)
    M = params["item_emb"]
    nll_tgt = batch.nll_targets(config.nll_target)
    w = _row_weights(batch.contributing, reduction)
    wn = _row_weights(nll_tgt >= 0, reduction)
    nce_mask = batch.nce_mask(config.nce_negative_scope)
    nll_terms, nce_terms = [], []
    B, L = batch.labels.shape
    for b in range(B):
        negs = [int(i) for i in batch.negatives[b] if i != PAD]
        for r in range(L):
            h = H[b, r]
            if nll_tgt[b, r] >= 0:
                item = M[batch.labels[b, nll_tgt[b, r]]]
                nll_terms.append(wn[b, r] * nll_sampled_softmax(float(h @ item),
                                                                [float(h @ M[i]) for i in negs]))
            if not batch.contributing[b, r]:
                continue
            target = M[batch.labels[b, batch.targets[b, r]]]
            skip_items = [M[batch.labels[b, j]] for j in np.flatnonzero(nce_mask[b, r])]
            nce_terms.append(w[b, r] * info_nce(h, target, skip_items))
    nll = math.fsum(nll_terms)
    nce = math.fsum(nce_terms)
    return LossBreakdown(nll, nce, config.alpha * nll + config.beta * nce,
                         int((nll_tgt >= 0).sum()))
