import math

import numpy as np
import pytest

from l2r.diagnostics import (
    IMPORTANCE_NOTE,
    UsageStats,
    export_routing_pca,
    expert_usage,
    pairwise_cosine_variance,
    score_landscape,
    sips_landscape_bound,
    usage_entropy,
    usage_from_arrays,
)
from l2r.gating import decide, decisions_from_logits
from l2r.numeric import Rng, sample_unit_sphere
from l2r.routing import RouterConfig, ScoreMode, psi

CFG2 = RouterConfig(d=2, r=2, n_experts=1, n_anchors=1, top_k=1)


def _iso(r, n=10_000, seed=2025):
    return sample_unit_sphere(Rng(seed, f"iso/{r}"), r, n)


class TestConcentration:
    def test_identical_vectors(self):
        rep = pairwise_cosine_variance(np.tile([1.0, 2.0, 3.0], (50, 1)))
        assert rep.variance == pytest.approx(0.0, abs=1e-20)
        assert rep.n_pairs == 50 * 49 // 2

    def test_r2_half(self):
        rep = pairwise_cosine_variance(_iso(2), rng=Rng(1))
        assert abs(rep.variance - 0.5) <= 0.02
        assert rep.isotropic_reference == 0.5

    def test_r512(self):
        rep = pairwise_cosine_variance(_iso(512), rng=Rng(2))
        assert abs(rep.variance - 1 / 512) <= 0.3 / 512
        assert rep.isotropic_reference == 1 / 512

    def test_decreasing(self):
        v = [pairwise_cosine_variance(_iso(r), rng=Rng(3)).variance for r in (2, 8, 32, 512)]
        assert all(a > b for a, b in zip(v, v[1:]))

    def test_rotation_invariant(self):
        x = Rng(4).normal(size=(300, 5))
        rot, _ = np.linalg.qr(Rng(5).normal(size=(5, 5)))
        a = pairwise_cosine_variance(x).variance
        b = pairwise_cosine_variance(x @ rot).variance
        assert abs(a - b) <= 1e-10

    def test_zero_vectors_skipped(self):
        x = np.vstack([_iso(3, 20), np.zeros((4, 3))])
        rep = pairwise_cosine_variance(x)
        assert rep.n_zero_skipped == 4
        assert rep.n_pairs == 190

    def test_subsampling(self):
        rep = pairwise_cosine_variance(_iso(3, 200), max_pairs=1000, rng=Rng(6))
        assert rep.n_pairs == 1000
        with pytest.raises(ValueError):
            pairwise_cosine_variance(_iso(3, 200), max_pairs=1000)

    def test_too_few(self):
        with pytest.raises(ValueError):
            pairwise_cosine_variance(np.vstack([np.ones(2), np.zeros(2)]))


class TestLandscape:
    def test_dot_value_and_level_sets(self):
        g = score_landscape([2.0, 2.0], CFG2.with_(mode=ScoreMode.L2R_DOT), resolution=7)
        xs, ys = g.axes()
        ix, iy = int(np.argmin(np.abs(xs - 1))), int(np.argmin(np.abs(ys - 1)))
        assert g.values[iy, ix] == pytest.approx(4.0, abs=1e-12)
        # along (1, -1) the value is constant
        diag = [g.values[j, len(xs) - 1 - j] for j in range(len(xs))]
        np.testing.assert_allclose(diag, diag[0], atol=1e-12)

    def test_cosine_scale_invariance(self):
        anchor = np.array([1.0, 0.5])
        g = score_landscape(anchor, CFG2.with_(mode=ScoreMode.L2R_COSINE), (-3, 3), (-1.5, 1.5), resolution=13)
        xs, ys = g.axes()
        for c in (0.5, 1.0, 2.0, 3.0):
            j = int(np.argmin(np.abs(xs - c * anchor[0])))
            i = int(np.argmin(np.abs(ys - c * anchor[1])))
            assert g.values[i, j] == pytest.approx(1.0, abs=1e-12)

    def test_sips_point(self):
        g = score_landscape([2.0, 2.0], CFG2, (0, 2), (0, 2), resolution=3)
        assert g.values[0, 2] == pytest.approx(2.0235967052696697, rel=1e-14)

    def test_layout_y_outer(self):
        g = score_landscape([1.0, 0.0], CFG2.with_(mode=ScoreMode.L2R_DOT), (0, 1), (5, 6), resolution=2)
        # rows follow y, so the dot with [1, 0] varies along axis 1 only
        np.testing.assert_array_equal(g.values, [[0, 1], [0, 1]])

    @pytest.mark.parametrize("beta", [0.0, 0.25, 1.0])
    def test_sips_bounded(self, beta):
        anchor = np.array([-2.0, 0.0])
        cfg = CFG2.with_(beta=beta)
        g = score_landscape(anchor, cfg)
        bound = sips_landscape_bound(anchor, cfg)
        assert bound == pytest.approx((1 + beta) * 1.25)
        assert np.abs(g.values).max() <= bound * (1 + 1e-12)

    def test_dot_linear_in_extent(self):
        cfg = CFG2.with_(mode=ScoreMode.L2R_DOT)
        a = score_landscape([-2.0, 0.0], cfg, (-3, 3), (-3, 3), 121)
        b = score_landscape([-2.0, 0.0], cfg, (-6, 6), (-6, 6), 121)
        for i, j in [(0, 0), (0, -1), (-1, 0), (-1, -1)]:
            assert b.values[i, j] == 2 * a.values[i, j]

    def test_beta0_is_scaled_cosine(self):
        anchor = np.array([-2.0, 0.0])
        s = score_landscape(anchor, CFG2.with_(beta=0.0, gamma=1.5))
        c = score_landscape(anchor, CFG2.with_(mode=ScoreMode.L2R_COSINE))
        np.testing.assert_allclose(s.values, 1.5 * psi(2.0, 4.0) * c.values, atol=1e-9)

    def test_beta0_unit_anchor_factor_gamma(self):
        anchor = np.array([0.6, -0.8])
        s = score_landscape(anchor, CFG2.with_(beta=0.0, gamma=1.5))
        c = score_landscape(anchor, CFG2.with_(mode=ScoreMode.L2R_COSINE))
        np.testing.assert_allclose(s.values, 1.5 * c.values, atol=1e-9)

    def test_rejects_r_not_2(self):
        with pytest.raises(ValueError):
            score_landscape([1.0, 0.0, 0.0], RouterConfig(d=3, r=3))


class TestUsage:
    def _decisions(self, logits, k):
        return decisions_from_logits(np.asarray(logits, float), RouterConfig(d=2, n_experts=len(logits[0]), top_k=k))

    def test_all_top1_to_three(self):
        logits = np.zeros((10, 5))
        logits[:, 3] = 5.0
        u = expert_usage(self._decisions(logits, 2), 5, 2)
        np.testing.assert_array_equal(u.top1_freq, np.eye(5)[3])

    def test_uniform_scores_tie_break(self):
        u = expert_usage(self._decisions(np.zeros((6, 4)), 2), 4, 2)
        np.testing.assert_allclose(u.importance, 0.25, rtol=1e-15)
        # exact ties resolve to the first k experts
        np.testing.assert_array_equal(u.topk_freq, [1, 1, 0, 0])

    def test_counting_oracle(self):
        logits = Rng(7).normal(size=(200, 6)) * 2
        decs = self._decisions(logits, 3)
        u = expert_usage(decs, 6, 3)
        top1 = np.zeros(6)
        topk = np.zeros(6)
        for d in decs:
            top1[d.selected[0]] += 1
            for i in d.selected:
                topk[i] += 1
        np.testing.assert_allclose(u.top1_freq, top1 / 200, atol=1e-12)
        np.testing.assert_allclose(u.topk_freq, topk / 200, atol=1e-12)
        assert u.top1_freq.sum() == pytest.approx(1, abs=1e-9)
        assert u.topk_freq.sum() == pytest.approx(3, abs=1e-9)
        assert u.importance.sum() == pytest.approx(1, abs=1e-9)

    def test_vectorised_matches(self):
        logits = Rng(8).normal(size=(50, 4))
        decs = self._decisions(logits, 2)
        a = expert_usage(decs, 4, 2)
        b = usage_from_arrays(np.stack([d.scores for d in decs]), np.array([d.selected for d in decs]))
        np.testing.assert_allclose(a.importance, b.importance, rtol=1e-14)
        np.testing.assert_array_equal(a.topk_freq, b.topk_freq)

    def test_wrong_k(self):
        with pytest.raises(ValueError):
            expert_usage(self._decisions(np.zeros((2, 4)), 2), 4, 3)

    def test_importance_note(self):
        assert "softmax" in IMPORTANCE_NOTE


class TestEntropy:
    def _stats(self, p):
        p = np.asarray(p, float)
        return UsageStats(p, p, p, 1)

    def test_one_hot(self):
        assert usage_entropy(self._stats([0, 1, 0])) == (0.0, 0.0)

    def test_uniform_16(self):
        h, _ = usage_entropy(self._stats(np.full(16, 1 / 16)))
        assert h == pytest.approx(math.log(16), rel=1e-14)
        assert h == pytest.approx(2.7726, abs=1e-4)

    def test_half_half(self):
        h, _ = usage_entropy(self._stats([0.5, 0.5, 0, 0]))
        assert h == pytest.approx(math.log(2), rel=1e-15)


class TestPcaExport:
    def test_r2_passthrough(self):
        rng = Rng(9)
        x, q = rng.normal(size=(20, 6)), rng.normal(size=(20, 2))
        decs = [decide(rng.normal(size=3), RouterConfig(d=2, n_experts=3, top_k=1)) for _ in range(20)]
        out = export_routing_pca(x, q, decs)
        assert not out.q_projected
        np.testing.assert_array_equal([r[2:4] for r in out.rows], q)

    def test_constant_tokens(self):
        rng = Rng(10)
        decs = [decide([1.0, 0.0], RouterConfig(d=2, n_experts=2, top_k=1))] * 5
        out = export_routing_pca(np.ones((5, 4)), rng.normal(size=(5, 2)), decs)
        assert out.x_degenerate
        assert all(r[0] == 0 and r[1] == 0 for r in out.rows)

    def test_clusters_recovered(self):
        rng = Rng(11)
        centres = np.array([[5.0, 0, 0, 0], [0, 5.0, 0, 0], [0, 0, 5.0, 0]])
        labels = np.repeat(np.arange(3), 30)
        x = centres[labels] + 0.1 * rng.normal(size=(90, 4))
        queries = x[:, :3]
        # dominant anchors: expert i matches the i-th axis
        cfg = RouterConfig(d=3, r=3, n_experts=3, n_anchors=1, top_k=1)
        decs = [decide(queries[t] @ np.eye(3), cfg) for t in range(90)]
        out = export_routing_pca(x, queries, decs)
        assert out.q_projected
        np.testing.assert_array_equal([r[4] for r in out.rows], labels)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            export_routing_pca(np.ones((3, 2)), np.ones((2, 2)), [])
