"""Full-catalog ranking and the metric suite: HR@{1,5,10,20}, MAP@10 and the
skip down-ranking MRR@10 (lower is better)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .models import encoders
from .models.checkpoint import Checkpoint
from .session_data import END, NUM_RESERVED, Dataset, HoldoutSplit

HR_CUTOFFS = (1, 5, 10, 20)


class VocabularyMismatch(ValueError):
    pass


@dataclass
class MetricsReport:
    hr: dict[int, float]
    map10: float
    skip_mrr10: float | None
    n_pos: int
    n_skip: int
    per_seed: dict = field(default_factory=dict)

    def to_json(self, model: str, dataset_hash: str, seed: int) -> dict:
        return {
            "model": model,
            "dataset_hash": dataset_hash,
            "seed": seed,
            "hr1": self.hr[1],
            "hr5": self.hr[5],
            "hr10": self.hr[10],
            "hr20": self.hr[20],
            "map10": self.map10,
            "skip_mrr10": self.skip_mrr10,
            "n_pos": self.n_pos,
            "n_skip": self.n_skip,
        }


def rank_from_scores(scores: np.ndarray, target_col: int) -> int:
    """1 + items scoring strictly higher + equal-scoring items at lower index."""
    s = scores[target_col]
    higher = int(np.count_nonzero(scores > s))
    ties_before = int(np.count_nonzero(scores[:target_col] == s))
    return 1 + higher + ties_before


def ranks_from_score_matrix(scores: np.ndarray, target_cols: np.ndarray) -> np.ndarray:
    """Row-wise version of :func:`rank_from_scores`."""
    rows = np.arange(len(target_cols))
    s = scores[rows, target_cols][:, None]
    higher = (scores > s).sum(axis=1)
    before = np.arange(scores.shape[1])[None, :] < target_cols[:, None]
    ties = ((scores == s) & before).sum(axis=1)
    return 1 + higher + ties


def prediction_rows(params, config, prefixes, batch_size: int = 256) -> np.ndarray:
    """Final prediction embedding for each prefix (end token appended for the
    bidirectional encoder)."""
    out = np.zeros((len(prefixes), config.embed_dim))
    order = sorted(range(len(prefixes)), key=lambda i: len(prefixes[i]))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        seqs = [list(prefixes[i]) + ([END] if config.is_bidirectional else []) for i in idx]
        L = max(len(s) for s in seqs)
        tokens = np.zeros((len(seqs), L), dtype=np.int64)
        for b, s in enumerate(seqs):
            tokens[b, :len(s)] = s
        H, _ = encoders.forward(params, config, tokens)
        last = np.array([len(s) - 1 for s in seqs])
        out[idx] = H[np.arange(len(seqs)), last]
    return out


def rank_targets(params, config, prefixes, targets) -> np.ndarray:
    if any(len(p) == 0 for p in prefixes):
        raise ValueError("cannot rank from an empty prefix")
    preds = prediction_rows(params, config, prefixes)
    scores = preds @ params["item_emb"][NUM_RESERVED:].T
    cols = np.asarray(targets, dtype=np.int64) - NUM_RESERVED
    if cols.size and (cols.min() < 0 or cols.max() >= scores.shape[1]):
        raise IndexError("target outside the real-item range")
    return ranks_from_score_matrix(scores, cols)


def rank_target(params, config, prefix, target: int) -> int:
    if len(prefix) == 0:
        raise ValueError("cannot rank from an empty prefix")
    return int(rank_targets(params, config, [prefix], [target])[0])


def _fsum_mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def compute_metrics(pos_ranks, skip_ranks) -> MetricsReport:
    pos = np.asarray(pos_ranks, dtype=np.int64)
    skip = np.asarray(skip_ranks, dtype=np.int64)
    if pos.size == 0:
        raise ValueError("need at least one positive target")
    hr = {k: _fsum_mean((pos <= k).astype(float)) for k in HR_CUTOFFS}
    map10 = _fsum_mean(np.where(pos <= 10, 1.0 / pos, 0.0))
    skip_mrr = _fsum_mean(np.where(skip <= 10, 1.0 / skip, 0.0)) if skip.size else None
    return MetricsReport(hr, map10, skip_mrr, int(pos.size), int(skip.size))


def split_targets(splits: list[HoldoutSplit], which: str = "test"):
    """(prefixes, targets, skipped) for validation or test evaluation."""
    prefixes, targets, flags = [], [], []
    for sp in splits:
        if which == "test":
            prefixes.append(sp.train_prefix.items + (sp.validation_target[0],))
            item, skip = sp.test_target
        elif which == "validation":
            prefixes.append(sp.train_prefix.items)
            item, skip = sp.validation_target
        else:
            raise ValueError(f"unknown split {which!r}")
        targets.append(item)
        flags.append(skip)
    return prefixes, targets, np.asarray(flags, dtype=bool)


def evaluate_params(params, config, splits, which: str = "test") -> MetricsReport:
    prefixes, targets, skipped = split_targets(splits, which)
    ranks = rank_targets(params, config, prefixes, targets)
    return compute_metrics(ranks[~skipped], ranks[skipped])


def load_sequential(checkpoint: Checkpoint):
    cfg = encoders.ModelConfig(**checkpoint.config["model"])
    return checkpoint.tensors, cfg


def evaluate(checkpoint: Checkpoint, dataset: Dataset, which: str = "test") -> MetricsReport:
    if checkpoint.vocab_hash != dataset.vocab.digest():
        raise VocabularyMismatch("checkpoint vocabulary hash does not match the dataset")
    splits = dataset.splits()
    if checkpoint.kind == "baseline":
        from . import baselines

        return baselines.evaluate_baseline(checkpoint, splits, which)
    params, cfg = load_sequential(checkpoint)
    return evaluate_params(params, cfg, splits, which)


def relative_delta(a: float, b: float) -> float:
    """Signed relative change of b over a, in percent."""
    if a == 0:
        return 0.0 if b == 0 else math.copysign(math.inf, b)
    return (b - a) / a * 100.0


def format_percent(delta: float) -> str:
    if math.isinf(delta):
        return "+inf%" if delta > 0 else "−inf%"
    r = int(math.floor(abs(delta) + 0.5))
    if r == 0:
        return "0%"
    return f"+{r}%" if delta > 0 else f"−{r}%"


METRIC_KEYS = ("hr1", "hr5", "hr10", "hr20", "map10", "skip_mrr10")


def compare_metrics(a: dict, b: dict) -> dict:
    """Per-metric relative delta of ``b`` over ``a``.  For ``skip_mrr10`` a
    decrease is an improvement."""
    if a.get("dataset_hash") != b.get("dataset_hash"):
        raise VocabularyMismatch("metric files refer to different datasets")
    out = {}
    for key in METRIC_KEYS:
        va, vb = a.get(key), b.get(key)
        if va is None or vb is None:
            continue
        delta = relative_delta(va, vb)
        lower_better = key == "skip_mrr10"
        improved = delta < 0 if lower_better else delta > 0
        out[key] = {"a": va, "b": vb, "delta_pct": delta, "label": format_percent(delta),
                    "improvement": improved}
    return out


def render_comparison(cmp: dict, name_a: str = "A", name_b: str = "B") -> str:
    w = max(10, len(name_a) + 2, len(name_b) + 2)
    lines = [f"{'metric':<12}{name_a:>{w}}{name_b:>{w}}  delta"]
    for key, row in cmp.items():
        flag = " (improvement)" if row["improvement"] else ""
        lines.append(f"{key:<12}{row['a']:>{w}.3f}{row['b']:>{w}.3f}  ({row['label']}){flag}")
    return "\n".join(lines)


def render_table(rows: dict[str, dict], baseline: str) -> str:
    """Table-style report: one column per run, deltas relative to ``baseline``
    in parentheses."""
    names = list(rows)
    head = f"{'metric':<12}" + "".join(f"{n:>20}" for n in names)
    lines = [head]
    for key in METRIC_KEYS:
        cells = []
        for n in names:
            v = rows[n].get(key)
            if v is None:
                cells.append(f"{'-':>20}")
                continue
            cell = f"{v:.3f}"
            if n != baseline and rows[baseline].get(key) is not None:
                cell += f" ({format_percent(relative_delta(rows[baseline][key], v))})"
            cells.append(f"{cell:>20}")
        lines.append(f"{key:<12}" + "".join(cells))
    return "\n".join(lines)


def dump_metrics(record: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")
