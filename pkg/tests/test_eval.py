import numpy as np
import pytest

from skiprec import evaluation
from skiprec.evaluation import (
    VocabularyMismatch,
    compare_metrics,
    compute_metrics,
    evaluate,
    format_percent,
    rank_from_scores,
    rank_target,
    render_comparison,
    render_table,
)
from skiprec.gradcheck import random_params
from skiprec.models import ARCHITECTURES, ModelConfig, encoders
from skiprec.session_data import NUM_RESERVED
from skiprec.synthetic import SyntheticConfig, make_dataset
from skiprec.objective import LossConfig
from skiprec.training import TrainConfig, make_checkpoint


def brute_force_rank(scores, col):
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    return order.index(col) + 1


class TestRankFromScores:
    def test_unique_max(self):
        assert rank_from_scores(np.array([0.1, 0.9, 0.3]), 1) == 1

    def test_all_equal(self):
        s = np.zeros(6)
        assert rank_from_scores(s, 0) == 1
        assert rank_from_scores(s, 4) == 5

    def test_brute_force_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            s = rng.integers(0, 5, size=20).astype(float)
            col = int(rng.integers(20))
            assert rank_from_scores(s, col) == brute_force_rank(s, col)


class TestRankTarget:
    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_matches_exhaustive_sort(self, arch):
        catalog = 40
        rng = np.random.default_rng(1)
        for seed in range(25):
            cfg = ModelConfig(arch, embed_dim=8, max_len=8, heads=2, blocks=1,
                              vocab_size=catalog + NUM_RESERVED)
            params = random_params(cfg, seed, scale=0.5)
            prefix = rng.integers(NUM_RESERVED, catalog + NUM_RESERVED, size=int(rng.integers(1, 7)))
            target = int(rng.integers(NUM_RESERVED, catalog + NUM_RESERVED))
            h = encoders.encode(params, cfg, list(prefix)).predicted[-1]
            scores = [float(h @ params["item_emb"][i]) for i in range(NUM_RESERVED, catalog + NUM_RESERVED)]
            assert rank_target(params, cfg, prefix, target) == \
                brute_force_rank(scores, target - NUM_RESERVED)

    def test_empty_prefix(self):
        cfg = ModelConfig("gru", embed_dim=4, vocab_size=10)
        with pytest.raises(ValueError):
            rank_target(random_params(cfg, 0), cfg, [], 5)

    def test_reserved_excluded(self):
        cfg = ModelConfig("gru", embed_dim=4, vocab_size=10)
        params = random_params(cfg, 0)
        with pytest.raises(IndexError):
            rank_target(params, cfg, [4, 5], 1)
        ranks = [rank_target(params, cfg, [4, 5], t) for t in range(NUM_RESERVED, 10)]
        assert sorted(ranks) == list(range(1, 8))


class TestComputeMetrics:
    def test_example(self):
        r = compute_metrics([1, 3, 12], [])
        assert r.hr == pytest.approx({1: 1 / 3, 5: 2 / 3, 10: 2 / 3, 20: 1.0})
        assert r.map10 == pytest.approx((1 + 1 / 3) / 3)
        assert r.map10 == pytest.approx(0.4444, abs=1e-4)

    def test_skip_mrr(self):
        assert compute_metrics([1], [4]).skip_mrr10 == 0.25
        assert compute_metrics([1], [11]).skip_mrr10 == 0.0

    def test_empty_skip_is_absent(self):
        r = compute_metrics([2], [])
        assert r.skip_mrr10 is None and r.n_skip == 0

    def test_no_positive(self):
        with pytest.raises(ValueError):
            compute_metrics([], [1])

    def test_identities_on_random_lists(self):
        rng = np.random.default_rng(2)
        for _ in range(10_000):
            ranks = rng.integers(1, 40, size=int(rng.integers(1, 12)))
            r = compute_metrics(ranks, [])
            hrs = [r.hr[k] for k in (1, 5, 10, 20)]
            assert hrs == sorted(hrs)
            assert all(0 <= h <= 1 for h in hrs)
            mrr = sum(1 / x for x in ranks if x <= 10) / len(ranks)
            assert r.map10 == pytest.approx(mrr, rel=1e-15, abs=0)


@pytest.fixture(scope="module")
def dataset():
    ds, _ = make_dataset(SyntheticConfig(seed=11))
    return ds


def checkpoint_for(dataset, cfg, params):
    return make_checkpoint(params, cfg, LossConfig(), TrainConfig(), dataset.vocab.digest())


class TestEvaluate:
    def test_random_model_near_chance(self, dataset):
        cfg = ModelConfig("gru", embed_dim=32, vocab_size=len(dataset.vocab))
        report = evaluate(checkpoint_for(dataset, cfg, encoders.init_params(cfg, 5)), dataset)
        n = report.n_pos
        assert n >= 1000
        p = 10 / 500
        assert abs(report.hr[10] - p) < 4 * np.sqrt(p * (1 - p) / n)

    def test_perfect_model(self, dataset, monkeypatch):
        cfg = ModelConfig("gru", embed_dim=4, vocab_size=len(dataset.vocab))
        params = encoders.init_params(cfg, 0)
        params["item_emb"] = np.zeros((len(dataset.vocab), len(dataset.vocab)))
        params["item_emb"][np.arange(len(dataset.vocab)), np.arange(len(dataset.vocab))] = 1.0
        prefixes, targets, _ = evaluation.split_targets(dataset.splits(), "test")
        lookup = {tuple(p): t for p, t in zip(prefixes, targets)}

        def oracle_rows(params, config, prefixes, batch_size=256):
            return params["item_emb"][[lookup[tuple(p)] for p in prefixes]]

        monkeypatch.setattr(evaluation, "prediction_rows", oracle_rows)
        report = evaluation.evaluate_params(params, cfg, dataset.splits())
        assert report.hr[1] == 1.0 and report.map10 == 1.0
        assert report.skip_mrr10 == 1.0

    def test_read_only(self, dataset, tmp_path):
        cfg = ModelConfig("sasrec", embed_dim=8, heads=2, vocab_size=len(dataset.vocab))
        ck = checkpoint_for(dataset, cfg, encoders.init_params(cfg, 1))
        path = tmp_path / "m.ckpt"
        ck.save(path)
        before = path.read_bytes()
        evaluate(type(ck).load(path), dataset)
        assert path.read_bytes() == before

    def test_vocabulary_mismatch(self, dataset):
        cfg = ModelConfig("gru", embed_dim=4, vocab_size=len(dataset.vocab))
        ck = make_checkpoint(encoders.init_params(cfg, 0), cfg, LossConfig(), TrainConfig(), "other")
        with pytest.raises(VocabularyMismatch):
            evaluate(ck, dataset)

    def test_bidirectional_uses_end_token(self, dataset):
        cfg = ModelConfig("bert4rec", embed_dim=8, heads=2, vocab_size=len(dataset.vocab))
        params = random_params(cfg, 3)
        prefixes, _, _ = evaluation.split_targets(dataset.splits()[:5], "test")
        rows = evaluation.prediction_rows(params, cfg, prefixes)
        for p, row in zip(prefixes, rows):
            np.testing.assert_allclose(row, encoders.encode(params, cfg, list(p)).predicted[0],
                                       atol=1e-13)

    def test_batched_rows_match_single(self, dataset):
        cfg = ModelConfig("caser", embed_dim=8, vocab_size=len(dataset.vocab))
        params = random_params(cfg, 4)
        prefixes, _, _ = evaluation.split_targets(dataset.splits()[:40], "test")
        rows = evaluation.prediction_rows(params, cfg, prefixes, batch_size=7)
        for p, row in zip(prefixes, rows):
            np.testing.assert_allclose(row, encoders.encode(params, cfg, list(p)).predicted[-1],
                                       atol=1e-13)

    def test_metrics_json(self, dataset):
        r = compute_metrics([1, 2, 30], [3])
        rec = r.to_json("m", "h", 0)
        assert set(rec) == {"model", "dataset_hash", "seed", "hr1", "hr5", "hr10", "hr20",
                            "map10", "skip_mrr10", "n_pos", "n_skip"}


class TestCompare:
    def test_table_examples(self):
        cmp = compare_metrics({"dataset_hash": "h", "hr1": 0.377, "skip_mrr10": 0.540},
                              {"dataset_hash": "h", "hr1": 0.410, "skip_mrr10": 0.460})
        assert cmp["hr1"]["label"] == "+9%" and cmp["hr1"]["improvement"]
        assert cmp["skip_mrr10"]["label"] == "−15%" and cmp["skip_mrr10"]["improvement"]

    def test_identical(self):
        rec = compute_metrics([1, 4, 9, 30], [2]).to_json("m", "h", 0)
        cmp = compare_metrics(rec, dict(rec))
        assert all(row["label"] == "0%" and not row["improvement"] for row in cmp.values())

    def test_dataset_mismatch(self):
        with pytest.raises(VocabularyMismatch):
            compare_metrics({"dataset_hash": "a", "hr1": 0.1}, {"dataset_hash": "b", "hr1": 0.1})

    def test_absent_skip_metric_skipped(self):
        cmp = compare_metrics({"dataset_hash": "h", "hr1": 0.2, "skip_mrr10": None},
                              {"dataset_hash": "h", "hr1": 0.3, "skip_mrr10": 0.1})
        assert "skip_mrr10" not in cmp

    def test_format_percent(self):
        assert format_percent(8.75) == "+9%"
        assert format_percent(-14.81) == "−15%"
        assert format_percent(0.4) == "0%"
        assert format_percent(2.5) == "+3%"

    def test_render(self):
        cmp = compare_metrics({"dataset_hash": "h", "hr1": 0.377}, {"dataset_hash": "h", "hr1": 0.410})
        text = render_comparison(cmp, "orig", "a-rather-long-run-name")
        header, row = text.splitlines()
        assert "(+9%)" in row and "(improvement)" in row
        assert header.index("a-rather-long-run-name") + len("a-rather-long-run-name") == \
            row.index("0.410") + len("0.410")

    def test_table(self):
        rows = {"orig": {"hr1": 0.377, "skip_mrr10": 0.54}, "ours": {"hr1": 0.41, "skip_mrr10": 0.46}}
        text = render_table(rows, "orig")
        assert "0.410 (+9%)" in text and "0.460 (−15%)" in text
