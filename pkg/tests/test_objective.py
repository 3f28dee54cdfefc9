import math

import numpy as np
import pytest

from skiprec import objective
from skiprec.gradcheck import random_params
from skiprec.models import ModelConfig
from skiprec.objective import (
    LossConfig,
    causal_batch,
    combined_loss,
    cosine,
    info_nce,
    loss_from_outputs,
    masked_batch,
    nll_sampled_softmax,
    reference_loss,
    sample_negatives,
)
from skiprec.session_data import Session


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def vector_with_cosine(ref, c, rng):
    """A vector whose cosine with ``ref`` is exactly ``c`` (up to rounding)."""
    ref = unit(ref)
    r = rng.normal(size=ref.shape)
    r -= (r @ ref) * ref
    r = unit(r)
    return c * ref + math.sqrt(max(0.0, 1 - c * c)) * r


class TestSampleNegatives:
    def test_support(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            negs, short = sample_negatives(13, [4, 7], 3, rng)
            assert set(negs) <= {3, 5, 6, 8, 9, 10, 11, 12}
            assert len(set(negs)) == 3 and not short

    def test_exhaustion(self):
        negs, short = sample_negatives(13, [4, 7], 8, np.random.default_rng(0))
        assert sorted(negs) == [3, 5, 6, 8, 9, 10, 11, 12] and not short

    def test_shortfall(self):
        negs, short = sample_negatives(13, [4, 7], 20, np.random.default_rng(0))
        assert len(negs) == 8 and short

    def test_deterministic(self):
        a, _ = sample_negatives(500, [3, 9, 40], 50, np.random.default_rng(5))
        b, _ = sample_negatives(500, [3, 9, 40], 50, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_uniform(self):
        rng = np.random.default_rng(1)
        counts = np.zeros(13)
        for _ in range(4000):
            negs, _ = sample_negatives(13, [4, 7], 2, rng)
            counts[negs] += 1
        eligible = counts[[3, 5, 6, 8, 9, 10, 11, 12]]
        expected = 4000 * 2 / 8
        assert ((eligible - expected) ** 2 / expected).sum() < 24.3  # chi2(7), 99.9%


class TestNLL:
    def test_uniform(self):
        assert nll_sampled_softmax(0.0, [0.0, 0.0]) == pytest.approx(math.log(3), abs=1e-15)

    def test_saturation(self):
        assert 0 <= nll_sampled_softmax(40.0, [0.0]) < 1e-15

    def test_no_overflow(self):
        assert nll_sampled_softmax(1000.0, [999.0]) == pytest.approx(math.log1p(math.exp(-1)))
        assert nll_sampled_softmax(-1000.0, [0.0]) == pytest.approx(1000.0)

    def test_full_softmax(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            s = rng.normal(0, 3, size=50)
            t = int(rng.integers(50))
            exact = -(s[t] - math.log(math.fsum(math.exp(x) for x in s)))
            got = nll_sampled_softmax(float(s[t]), np.delete(s, t))
            assert abs(got - exact) < 1e-10

    def test_non_negative(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            assert nll_sampled_softmax(rng.normal(0, 10), rng.normal(0, 10, size=5)) >= 0


class TestInfoNCE:
    def test_empty_negatives(self):
        assert info_nce([1.0, 2.0], [0.5, -1.0], []) == 0.0

    def test_perfect_positive_one_orthogonal_negative(self):
        got = info_nce([1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [[0.0, 3.0, 0.0]])
        assert got == math.log1p(math.exp(-1))
        assert got == pytest.approx(0.3133, abs=1e-4)

    def test_all_orthogonal(self):
        got = info_nce([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [[0.0, 0.0, 1.0], [0.0, 0.0, -2.0]])
        assert got == math.log(3)

    def test_zero_norm_is_cosine_zero(self):
        assert cosine([0.0, 0.0], [1.0, 2.0]) == 0.0
        assert info_nce([0.0, 0.0], [1.0, 0.0], [[0.0, 1.0]]) == pytest.approx(math.log(2))

    def test_scale_invariant(self):
        rng = np.random.default_rng(4)
        p, t, n = rng.normal(size=(3, 6))
        a = info_nce(p, t, [n])
        assert info_nce(7.5 * p, 0.1 * t, [3.0 * n]) == pytest.approx(a, rel=1e-13)

    def test_monotone_in_positive(self):
        rng = np.random.default_rng(5)
        pred = rng.normal(size=6)
        negs = [rng.normal(size=6) for _ in range(3)]
        losses = [info_nce(pred, vector_with_cosine(pred, c, rng), negs)
                  for c in np.linspace(-1, 1, 21)]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_monotone_in_negative(self):
        rng = np.random.default_rng(6)
        pred = rng.normal(size=6)
        pos = rng.normal(size=6)
        other = rng.normal(size=6)
        losses = [info_nce(pred, pos, [vector_with_cosine(pred, c, rng), other])
                  for c in np.linspace(-1, 1, 21)]
        assert all(a < b for a, b in zip(losses, losses[1:]))

    def test_permutation_bit_identical(self):
        rng = np.random.default_rng(7)
        pred, pos = rng.normal(size=(2, 5))
        negs = list(rng.normal(size=(9, 5)))
        ref = info_nce(pred, pos, negs)
        for _ in range(20):
            order = rng.permutation(len(negs))
            assert info_nce(pred, pos, [negs[i] for i in order]) == ref

    def test_bounds(self):
        rng = np.random.default_rng(8)
        for k in range(1, 6):
            cap = math.log1p(k * math.exp(2))
            for _ in range(50):
                val = info_nce(rng.normal(size=4), rng.normal(size=4), list(rng.normal(size=(k, 4))))
                assert 0 <= val <= cap
            e = np.array([1.0, 0, 0, 0])
            worst = info_nce(e, -e, [e] * k)
            assert worst == pytest.approx(cap, rel=1e-14)


SESSIONS = [Session([3, 5, 7, 9, 11, 4], [False, True, True, False, True, False]),
            Session([12, 6, 8, 10], [True, False, True, False])]
NEGATIVES = [[13, 14, 15, 8], [3, 14, 5]]


def _setup(arch="causal-attention", d=4, seed=0):
    cfg = ModelConfig(arch, embed_dim=d, max_len=6, heads=2, vocab_size=16, caser_window=3)
    params = random_params(cfg, seed)
    if cfg.is_bidirectional:
        batch = masked_batch(SESSIONS, [[1, 3], [0]], NEGATIVES)
    else:
        batch = causal_batch(SESSIONS, NEGATIVES)
    return cfg, params, batch


class TestBatchTargets:
    def test_causal_targets(self):
        b = causal_batch(SESSIONS, NEGATIVES)
        np.testing.assert_array_equal(b.targets[0], [3, 3, 3, 5, 5, -1])
        np.testing.assert_array_equal(b.targets[1], [1, 3, 3, -1, -1, -1])
        np.testing.assert_array_equal(b.next_items[0], [1, 2, 3, 4, 5, -1])
        np.testing.assert_array_equal(b.next_items[1], [1, 2, 3, -1, -1, -1])

    def test_masked_targets(self):
        b = masked_batch(SESSIONS, [[1, 3], [0]], NEGATIVES)
        # session 0: context = first 5 items, END at position 5
        assert b.tokens[0].tolist() == [3, 1, 7, 1, 11, 2]
        assert np.flatnonzero(b.rows[0]).tolist() == [1, 3, 5]
        assert b.targets[0, 1] == 3 and b.targets[0, 3] == 3 and b.targets[0, 5] == 5
        assert b.tokens[1].tolist()[:4] == [1, 6, 8, 2]
        assert b.targets[1, 0] == 1 and b.targets[1, 3] == 3
        assert b.next_items[0, 1] == 1 and b.next_items[0, 5] == 5

    def test_scopes(self):
        b = causal_batch(SESSIONS, NEGATIVES)
        all_mask = b.nce_mask("all-session-skips")
        between = b.nce_mask("between-next-positive")
        assert np.flatnonzero(all_mask[0, 0]).tolist() == [1, 2, 4]
        assert np.flatnonzero(between[0, 0]).tolist() == [1, 2]
        assert np.flatnonzero(between[0, 3]).tolist() == [4]
        assert not between[0, 5].any()
        assert np.all(between <= all_mask)


class TestCombinedLoss:
    @pytest.mark.parametrize("arch", ["recurrent", "convolutional", "causal-attention",
                                      "bidirectional-attention"])
    @pytest.mark.parametrize("scope", objective.SCOPES)
    def test_matches_scalar_recomputation(self, arch, scope):
        cfg, params, batch = _setup(arch)
        lc = LossConfig(alpha=1.0, beta=0.5, nce_negative_scope=scope)
        got = combined_loss(params, cfg, batch, lc)
        ref = reference_loss(params, cfg, batch, lc)
        assert abs(got.nll - ref.nll) < 1e-10
        assert abs(got.nce - ref.nce) < 1e-10
        assert abs(got.combined - ref.combined) < 1e-10

    def test_scalar_recomputation_by_hand(self):
        cfg, params, batch = _setup()
        from skiprec.models import forward

        H, _ = forward(params, cfg, batch.tokens)
        M = params["item_emb"]
        per_session_nll, per_session_nce = [], []
        for b, s in enumerate(SESSIONS):
            nll, nce = [], []
            skips = [M[s.items[j]] for j in range(len(s)) if s.skipped[j]]
            for t in range(len(s)):
                later = [j for j in range(t + 1, len(s)) if not s.skipped[j]]
                if not later:
                    continue
                target = M[s.items[later[0]]]
                nll.append(nll_sampled_softmax(H[b, t] @ target, [H[b, t] @ M[i] for i in NEGATIVES[b]]))
                nce.append(info_nce(H[b, t], target, skips))
            per_session_nll.append(np.mean(nll))
            per_session_nce.append(np.mean(nce))
        got = combined_loss(params, cfg, batch, LossConfig(alpha=1.0, beta=0.5))
        assert got.nll == pytest.approx(np.mean(per_session_nll), abs=1e-12)
        assert got.nce == pytest.approx(np.mean(per_session_nce), abs=1e-12)

    def test_beta_zero(self):
        cfg, params, batch = _setup()
        got = combined_loss(params, cfg, batch, LossConfig(alpha=1.3, beta=0.0))
        assert got.combined == 1.3 * got.nll

    def test_all_positive_batch(self):
        cfg = ModelConfig("gru", embed_dim=4, vocab_size=16)
        params = random_params(cfg, 1)
        batch = causal_batch([Session([3, 4, 5, 6], [False] * 4)], [[7, 8, 9]])
        got = combined_loss(params, cfg, batch, LossConfig(alpha=1.0, beta=0.5))
        assert got.nce == 0.0 and got.combined == got.nll

    def test_linearity(self):
        cfg, params, batch = _setup()
        a = combined_loss(params, cfg, batch, LossConfig(alpha=0.7, beta=0.3))
        b = combined_loss(params, cfg, batch, LossConfig(alpha=1.4, beta=0.6))
        assert b.combined == pytest.approx(2 * a.combined, rel=1e-14)

    def test_combined_identity(self):
        cfg, params, batch = _setup()
        got = combined_loss(params, cfg, batch, LossConfig(alpha=0.9, beta=0.2))
        assert got.combined == pytest.approx(0.9 * got.nll + 0.2 * got.nce, rel=1e-12)

    def test_no_contributing_rows(self):
        cfg = ModelConfig("gru", embed_dim=4, vocab_size=16)
        params = random_params(cfg, 1)
        batch = causal_batch([Session([3, 4], [False, True])], [[7, 8]])
        with pytest.raises(ValueError):
            combined_loss(params, cfg, batch, LossConfig())

    def test_next_item_target_uses_skipped_items(self):
        cfg, params, batch = _setup("recurrent")
        a = combined_loss(params, cfg, batch, LossConfig(beta=0.5))
        b = combined_loss(params, cfg, batch, LossConfig(beta=0.5, nll_target="next-item"))
        assert a.nce == b.nce
        assert a.nll != b.nll
        ref = reference_loss(params, cfg, batch, LossConfig(beta=0.5, nll_target="next-item"))
        assert abs(b.combined - ref.combined) < 1e-10

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_raises(self):
        cfg, params, batch = _setup()
        H = np.full((2, 6, 4), np.inf)
        with pytest.raises(objective.NumericError) as info:
            loss_from_outputs(H, params["item_emb"], batch, LossConfig())
        assert info.value.batch_id is None

    def test_numeric_error_carries_batch_id(self):
        cfg, params, _ = _setup()
        batch = causal_batch(SESSIONS, NEGATIVES, batch_id=(3, 7))
        params = dict(params)
        params["item_emb"] = params["item_emb"].copy()
        params["item_emb"][5] = np.nan
        with pytest.raises(objective.NumericError) as info:
            objective.loss_and_grad(params, cfg, batch, LossConfig())
        assert info.value.batch_id == (3, 7)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(alpha=-1), dict(beta=-0.1), dict(num_negatives=0),
                                    dict(nce_negative_scope="nearby"), dict(nll_target="x")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)
