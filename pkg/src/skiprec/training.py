"""Optimization loop for the sequence encoders."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import objective
from .evaluation import evaluate_params
from .models import encoders
from .models.checkpoint import Checkpoint
from .objective import LossConfig, NumericError
from .session_data import MASK, Dataset, Session

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state: OptimizerState, config: TrainConfig):
    """Bias-corrected Adam update, in place.  Returns (params, state)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NumericError(f"{bad} non-finite gradient entries in {name!r} "
                               f"at step {state.step + 1}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return params, state


def mask_sequence(prefix, p: float, rng: np.random.Generator):
    """Replace each position by the mask token with probability ``p``; if no
    position was drawn, one is forced uniformly.  Returns the masked copy and
    the sorted masked positions."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    items = np.asarray(prefix, dtype=np.int64).copy()
    if len(items) == 0:
        return items, []
    draw = rng.random(len(items)) < p
    if not draw.any():
        draw[rng.integers(len(items))] = True
    positions = np.flatnonzero(draw).tolist()
    items[draw] = MASK
    return items, positions


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    aborted: str | None = None

    def log_lines(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log)


def _batches(sessions: list[Session], batch_size: int, rng: np.random.Generator):
    """Length-bucketed batches in a random order."""
    order = rng.permutation(len(sessions))
    order = sorted(order.tolist(), key=lambda i: len(sessions[i]))  # stable
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


def make_checkpoint(params, model_config, loss_config, train_config, vocab_hash, meta=None):
    return Checkpoint(
        kind="sequential",
        config={"model": model_config.to_dict(), "loss": asdict(loss_config),
                "train": asdict(train_config)},
        vocab_hash=vocab_hash,
        tensors={k: v.copy() for k, v in params.items()},
        meta=meta or {},
    )


def train(dataset: Dataset, model_config: encoders.ModelConfig, loss_config: LossConfig,
          train_config: TrainConfig, progress=None) -> TrainResult:
    """Run the epoch loop and keep the best-validation (HR@10) parameters."""
    if not dataset.sessions:
        raise ValueError("empty dataset")
    if model_config.vocab_size != len(dataset.vocab):
        model_config = encoders.ModelConfig(**{**model_config.to_dict(),
                                               "vocab_size": len(dataset.vocab)})
    splits = dataset.splits()
    train_sessions = [sp.train_prefix for sp in splits if len(sp.train_prefix) >= 2]
    if not train_sessions:
        raise ValueError("no training prefix has at least two events")
    V = len(dataset.vocab)

    rng = np.random.Generator(np.random.PCG64(train_config.seed))
    params = encoders.init_params(model_config, train_config.seed)
    state = OptimizerState.zeros_like(params)
    vocab_hash = dataset.vocab.digest()

    best_params = {k: v.copy() for k, v in params.items()}
    best_hr, best_epoch, stale = -1.0, 0, 0
    records, aborted = [], None

    for epoch in range(1, train_config.epochs + 1):
        t0 = time.perf_counter()
        negatives, short = [], 0
        for s in train_sessions:
            negs, was_short = objective.sample_negatives(V, s.items, loss_config.num_negatives, rng)
            negatives.append(negs)
            short += was_short
        masks = None
        if model_config.is_bidirectional:
            masks = [mask_sequence(s.items[:-1], model_config.mask_prob, rng)[1]
                     for s in train_sessions]

        sums = np.zeros(3)
        n_batches = 0
        try:
            for bi, idx in enumerate(_batches(train_sessions, train_config.batch_size, rng)):
                sess = [train_sessions[i] for i in idx]
                negs = [negatives[i] for i in idx]
                batch_id = (epoch, bi)
                if model_config.is_bidirectional:
                    batch = objective.masked_batch(sess, [masks[i] for i in idx], negs, batch_id)
                else:
                    batch = objective.causal_batch(sess, negs, batch_id)
                if not batch.has_rows(loss_config):
                    continue
                loss, grads = objective.loss_and_grad(params, model_config, batch, loss_config)
                adam_step(params, grads, state, train_config)
                sums += (loss.nll, loss.nce, loss.combined)
                n_batches += 1
        except NumericError as exc:
            aborted = str(exc)
            log.error("training aborted: %s", exc)
            break

        val = evaluate_params(params, model_config, splits, "validation")
        means = sums / max(n_batches, 1)
        rec = {
            "epoch": epoch,
            "nll": float(means[0]),
            "nce": float(means[1]),
            "combined": float(means[2]),
            "val_hr10": val.hr[10],
            "negative_shortfalls": short,
            "wallclock_ms": int(round((time.perf_counter() - t0) * 1000)),
        }
        records.append(rec)
        if progress:
            progress(rec)
        if val.hr[10] > best_hr:
            best_hr, best_epoch, stale = val.hr[10], epoch, 0
            best_params = {k: v.copy() for k, v in params.items()}
        else:
            stale += 1
            if stale >= train_config.patience:
                break

    ckpt = make_checkpoint(best_params, model_config, loss_config, train_config, vocab_hash,
                           meta={"best_epoch": best_epoch, "best_val_hr10": best_hr,
                                 "dataset_hash": dataset.digest()})
    return TrainResult(ckpt, records, best_epoch, aborted)
