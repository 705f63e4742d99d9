"""End-to-end acceptance checks, one test (and one PASS/FAIL line) per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
terminal summary.
"""

import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from l2r.calculus import LipschitzDomain, gradient_check_suite, verify_bounds
from l2r.cli import main
from l2r.diagnostics import pairwise_cosine_variance, score_landscape, sips_landscape_bound
from l2r.efficiency import GRID_HEADS, GRID_RANKS, OLMOE_REPORTED, router_param_grid
from l2r.harness import TrainConfig, make_dataset, train
from l2r.losses import BatchRoutingStats, LossWeights, combine, load_balance_loss, total_loss, z_loss
from l2r.numeric import Rng, sample_unit_sphere
from l2r.routing import RouterConfig, ScoreMode, cosine_logit, logsumexp, multi_anchor_logit, phi, psi, sips_logit
from l2r.gating import softmax_temp, top_k_batch

SEED = 20251014


def _pairs(rng, r, n, lo=0.1, hi=10.0):
    q = sample_unit_sphere(rng.split("q"), r, n) * rng.split("rho").uniform(lo, hi, n)[:, None]
    k = sample_unit_sphere(rng.split("k"), r, n) * rng.split("kappa").uniform(lo, hi, n)[:, None]
    return q, k


class TestCriterion01ParamGrid:
    def test_grid(self, tmp_path, verdict):
        start = time.perf_counter()
        code = main(["params", "--output-dir", str(tmp_path), "--set", "params.d=2048",
                     "--set", "params.n_experts=64", "--set", "params.layers=16"])
        elapsed = time.perf_counter() - start
        cells = {(c.r, c.heads): c for c in router_param_grid(2048, 64, 16)}
        linear_total = 2048 * 64 * 16
        count_bad, pct_bad = [], []
        for r in GRID_RANKS:
            for j, h in enumerate(GRID_HEADS):
                want_count, want_pct = OLMOE_REPORTED[r][j]
                exact = (2048 * r + 64 * h * r + 2048) * 16
                cell = cells[(r, h)]
                if cell.total != exact or cell.count_text != want_count:
                    count_bad.append(f"r={r},H={h}")
                if cell.percent_text != want_pct:
                    exact_pct = float(Fraction(exact * 100, linear_total))
                    pct_bad.append(f"r={r},H={h} published {want_pct} exact {exact_pct:.6g}")
        anchors = (cells[(2, 1)].count_text, cells[(2, 1)].percent_text,
                   cells[(32, 16)].count_text, cells[(32, 16)].percent_text)
        ok = code == 0 and not count_bad and not pct_bad and elapsed < 1.0
        verdict("criterion 1 (router parameter grid)", ok,
                f"counts {25 - len(count_bad)}/25 exact; percents {25 - len(pct_bad)}/25 match "
                f"[{'; '.join(pct_bad)}]; corners {anchors}; runtime {elapsed:.3f}s")


class TestCriterion02Gradients:
    def test_suite(self, verdict):
        start = time.perf_counter()
        results = {res.target: res for res in gradient_check_suite(Rng(SEED, "acceptance/grad"))}
        elapsed = time.perf_counter() - start
        wanted = {"cosine": 1e-5, "sips": 1e-5, "multi_anchor_sips": 1e-5, "toy_model": 1e-4}
        parts, ok = [], elapsed < 30.0
        for target, tol in wanted.items():
            res = results[target]
            good = res.max_rel_err < tol and res.n_checked >= 10_000
            ok &= good
            parts.append(f"{target} {res.max_rel_err:.2e} over {res.n_checked}")
        verdict("criterion 2 (analytic vs central-difference gradients)", ok,
                f"{'; '.join(parts)}; runtime {elapsed:.1f}s")


class TestCriterion03Bounds:
    def test_bounds(self, verdict):
        cfg = RouterConfig(d=8, r=8, n_experts=1, n_anchors=1, top_k=1, gamma=1.0, beta=1.0, p=4.0)
        domain = LipschitzDomain(0.1, 10.0, 0.1, 2.0)
        start = time.perf_counter()
        sips = verify_bounds(domain, cfg, 100_000, Rng(SEED, "acceptance/bounds/sips"))
        dot = verify_bounds(domain, cfg, 100_000, Rng(SEED, "acceptance/bounds/dot"), mode=ScoreMode.L2R_DOT)
        elapsed = time.perf_counter() - start
        ok = (sips.violations == 0 and sips.samples_checked == 100_000
              and dot.max_observed_grad_q > 0.99 * domain.kappa_max and elapsed < 30.0)
        verdict("criterion 3 (gradient bound soundness)", ok,
                f"sips violations {sips.violations}/{sips.samples_checked} (Lip_q {sips.lip_q:.6g}, "
                f"Lip_k {sips.lip_k:.6g}); dot max |grad_q| {dot.max_observed_grad_q:.6g} vs "
                f"0.99*kappa_max {0.99 * domain.kappa_max:.6g}; runtime {elapsed:.2f}s")


class TestCriterion04Transforms:
    def test_transforms(self, verdict):
        gamma, beta = 1.0, 1.0
        sweep = np.concatenate([np.linspace(-1e6, 1e6, 999_998), [-1e6, 1e6]])
        f = phi(sweep, gamma, beta)
        phi_ok = bool(np.all(f >= gamma * (1 - beta)) and np.all(f <= gamma * (1 + beta)) and sweep.size == 10**6)
        # a second setting where the lower edge is positive
        f2 = phi(sweep, 2.0, 0.3)
        phi_ok &= bool(np.all(f2 >= 2.0 * 0.7) and np.all(f2 <= 2.0 * 1.3))
        psi_ok = all(psi(1.0, p) == 1.0 for p in (1.0, 4.0, 7.5, 1e9))

        rng = Rng(SEED, "acceptance/transforms")
        cfg = RouterConfig(d=6, r=6, n_experts=1, n_anchors=1, top_k=1)
        kappa_max = 2.0
        q, k = _pairs(rng, cfg.r, 100_000)
        k = k / np.linalg.norm(k, axis=1, keepdims=True) * rng.split("kappa2").uniform(0.1, kappa_max, 100_000)[:, None]
        norm_hat = rng.split("nh").normal(size=100_000) * 5.0
        z = sips_logit(q, k, norm_hat, cfg)
        bound = cfg.gamma * (1 + cfg.beta) * psi(kappa_max, cfg.p)
        logit_ok = bool(np.all(np.abs(z) <= bound))
        verdict("criterion 4 (magnitude transform contracts)", phi_ok and psi_ok and logit_ok,
                f"phi range [{f.min():.6g}, {f.max():.6g}] over {sweep.size} points; psi(1)==1 {psi_ok}; "
                f"max |z| {np.abs(z).max():.6g} <= {bound:.6g} on {z.size} pairs")


class TestCriterion05Degeneration:
    def test_identities(self, verdict):
        rng = Rng(SEED, "acceptance/degeneration")
        cfg = RouterConfig(d=5, r=5, n_experts=1, n_anchors=1, top_k=1, beta=0.0, p=1e9, mode=ScoreMode.L2R_SIPS)
        q, k = _pairs(rng, cfg.r, 10_000)
        rho = np.linalg.norm(q, axis=1)
        sips = np.array([multi_anchor_logit(q[i], k[i:i + 1], rho[i], cfg) for i in range(q.shape[0])])
        cos = cosine_logit(q, k, cfg)
        cos_err = float(np.max(np.abs(sips - cos)))

        z1 = rng.split("single").normal(size=(10_000, 1)) * 50
        identity_ok = bool(np.array_equal(logsumexp(z1, axis=-1), z1[:, 0]))

        sandwich_ok = True
        lens = rng.split("lens").integers(1, 17, size=10_000)
        vals = rng.split("vals").normal(size=(10_000, 16)) * rng.split("scale").uniform(0.01, 100, 10_000)[:, None]
        for h, row in zip(lens, vals):
            zz = row[:h]
            pooled = logsumexp(zz)
            sandwich_ok &= bool(zz.max() <= pooled <= zz.max() + math.log(h) + 1e-12)
        verdict("criterion 5 (degeneration identities)", cos_err < 1e-6 and identity_ok and sandwich_ok,
                f"SIPS(beta=0,H=1,p=1e9) vs cosine max err {cos_err:.2e}; LSE(H=1) identity {identity_ok}; "
                f"LSE sandwich on 10000 instances {sandwich_ok}")


class TestCriterion06Concentration:
    def test_variance(self, verdict):
        root = Rng(SEED, "acceptance/variance")
        start = time.perf_counter()
        reports = [pairwise_cosine_variance(sample_unit_sphere(root.split(f"samples/{r}"), r, 10_000),
                                            rng=root.split(f"pairs/{r}"))
                   for r in (2, 8, 32, 512)]
        elapsed = time.perf_counter() - start
        values = [rep.variance for rep in reports]
        decreasing = all(a > b for a, b in zip(values, values[1:]))
        ok = abs(values[0] - 0.5) <= 0.02 and decreasing and elapsed < 10.0
        verdict("criterion 6 (angular concentration)", ok,
                f"variance by r=2,8,32,512: {', '.join(f'{v:.6g}' for v in values)}; runtime {elapsed:.2f}s")


class TestCriterion07Landscape:
    def test_landscape(self, verdict):
        anchor = np.array([-2.0, 0.0])
        base = RouterConfig(d=2, r=2, n_experts=1, n_anchors=1, top_k=1)
        bounded = []
        for beta in (0.0, 0.25, 1.0):
            cfg = base.with_(mode=ScoreMode.L2R_SIPS, beta=beta)
            grid = score_landscape(anchor, cfg)
            bounded.append(float(np.abs(grid.values).max()) <= sips_landscape_bound(anchor, cfg))

        dot_cfg = base.with_(mode=ScoreMode.L2R_DOT)
        small = score_landscape(anchor, dot_cfg, (-3, 3), (-3, 3)).values
        large = score_landscape(anchor, dot_cfg, (-6, 6), (-6, 6)).values
        linear_err = float(np.max(np.abs(large - 2 * small)))

        # the anchor factor psi(|anchor|) also multiplies the grid; it is 1 for a unit anchor
        errs = []
        for gamma in (1.0, 1.7):
            for a in (anchor, np.array([0.6, -0.8])):
                sips = score_landscape(a, base.with_(mode=ScoreMode.L2R_SIPS, beta=0.0, gamma=gamma)).values
                cos = score_landscape(a, base.with_(mode=ScoreMode.L2R_COSINE)).values
                errs.append(float(np.max(np.abs(sips - gamma * psi(np.linalg.norm(a), base.p) * cos))))
        ok = all(bounded) and linear_err < 1e-12 and max(errs) < 1e-9
        verdict("criterion 7 (score landscape geometry)", ok,
                f"sips bounded {bounded}; dot 2x-extent err {linear_err:.2e}; "
                f"beta=0 vs factor*cosine max err {max(errs):.2e}")


class TestCriterion08Losses:
    def test_identities(self, verdict):
        bal_errs = []
        for n, k in [(4, 1), (8, 2), (64, 8), (16, 16)]:
            logits = np.zeros((32, n))
            scores = softmax_temp(logits)
            stats = BatchRoutingStats.from_batch(logits, scores, top_k_batch(scores, k))
            bal_errs.append(abs(load_balance_loss(stats, n) - k))
        z_errs = [abs(z_loss(np.zeros((10, n))) - math.log(n) ** 2) for n in (2, 8, 64, 1000)]

        rng = Rng(SEED, "acceptance/losses")
        logits = rng.normal(size=(50, 8)) * 3
        scores = softmax_temp(logits)
        stats = BatchRoutingStats.from_batch(logits, scores, top_k_batch(scores, 2))
        task = 1.2345678901234567
        bd = total_loss(task, stats, logits, 0.01, 0.001)
        exact = bd.total == task + 0.01 * load_balance_loss(stats, 8) + 0.001 * z_loss(logits)
        exact &= combine(task, bd.bal, bd.z, LossWeights(0.01, 0.0)).total == task + 0.01 * bd.bal
        ok = max(bal_errs) <= 1e-9 and max(z_errs) <= 1e-9 and exact
        verdict("criterion 8 (loss identities)", ok,
                f"uniform L_bal max err {max(bal_errs):.1e}; zero-logit z-loss max err {max(z_errs):.1e}; "
                f"total bit-exact {exact}")

    def test_printed_constant(self, verdict):
        value = z_loss(np.zeros((1, 64)))
        verdict("criterion 8 (printed N=64 constant 17.2933 +/- 1e-4)", abs(value - 17.2933) <= 1e-4,
                f"z-loss {value!r}, (ln 64)^2 = {math.log(64) ** 2!r}, |diff| {abs(value - 17.2933):.2e}")


class TestCriterion09ToyTraining:
    SEEDS = (0, 1, 2)

    def test_training(self, verdict):
        base = RouterConfig(d=32, n_experts=8, top_k=2, r=2, n_anchors=4)
        start = time.perf_counter()
        sips, linear = {}, {}
        for seed in self.SEEDS:
            data = make_dataset(seed, n_clusters=8, d=32)
            tc = TrainConfig(steps=2000, seed=seed)
            sips[seed] = train(base.with_(mode=ScoreMode.L2R_SIPS), tc, data)
            linear[seed] = train(base.with_(mode=ScoreMode.LINEAR), tc, data)
        elapsed = time.perf_counter() - start
        ce_ok = all(not run.failed and run.final_eval.task < 0.2 * run.initial_eval.task for run in sips.values())
        bal_ok = all(run.final_eval.bal <= run.initial_eval.bal for run in sips.values())
        wins = sum(sips[s].summary()["entropy_top1"] >= linear[s].summary()["entropy_top1"] for s in self.SEEDS)
        detail = "; ".join(
            f"seed {s}: CE {sips[s].initial_eval.task:.4f}->{sips[s].final_eval.task:.4f}, "
            f"L_bal {sips[s].initial_eval.bal:.4f}->{sips[s].final_eval.bal:.4f}, "
            f"H_top1 sips {sips[s].summary()['entropy_top1']:.4f} linear {linear[s].summary()['entropy_top1']:.4f}"
            for s in self.SEEDS)
        verdict("criterion 9 (toy training)", ce_ok and bal_ok and wins >= 2 and elapsed < 300,
                f"CE clause {ce_ok}; L_bal clause {bal_ok}; entropy wins {wins}/3; {detail}; runtime {elapsed:.1f}s")


class TestCriterion10Determinism:
    COMMANDS = ("landscape", "variance", "params", "gradcheck", "bounds", "train", "compare", "usage", "pca-export")

    @staticmethod
    def _files(out):
        return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}

    def test_reruns(self, tmp_path, verdict, monkeypatch):
        monkeypatch.delenv("L2R_SEED", raising=False)
        differing = []
        for cmd in self.COMMANDS:
            a, b = tmp_path / f"{cmd}_a", tmp_path / f"{cmd}_b"
            main([cmd, "--output-dir", str(a)])
            main([cmd, "--output-dir", str(b)])
            hashes = [json.loads((o / "manifest.json").read_text())["outputs"] for o in (a, b)]
            if self._files(a) != self._files(b) or hashes[0] != hashes[1] or not self._files(a):
                differing.append(cmd)
        verdict("criterion 10 (byte-identical reruns)", not differing,
                f"{len(self.COMMANDS) - len(differing)}/{len(self.COMMANDS)} commands identical"
                + (f"; differing: {differing}" if differing else ""))
