import math

import numpy as np
import pytest

from shreve.data import LongitudinalGridData
from shreve.draws import PosteriorDraws
from shreve.evaluate import (
    classify_slopes,
    make_holdout,
    mspe,
    predict_heldout,
    psis_loo,
    waic,
)
from shreve.grid import build_inner_grid
from shreve.model import LOG_2PI


def direct_waic(ll):
    """Independent direct-formula evaluation (no log-sum-exp tricks)."""
    s, n = ll.shape
    lppd = 0.0
    penalty = 0.0
    for i in range(n):
        lppd += math.log(sum(math.exp(v) for v in ll[:, i]) / s)
        mean = sum(ll[:, i]) / s
        penalty += sum((v - mean) ** 2 for v in ll[:, i]) / (s - 1)
    return -2.0 * (lppd - penalty)


class TestWaic:
    def test_single_observation_no_variance(self):
        ll = np.full((5, 1), -1.7)
        assert waic(ll).waic == pytest.approx(-2.0 * -1.7, abs=1e-12)

    def test_identical_draws_many_points(self):
        vals = np.array([-1.0, -2.5, -0.3])
        ll = np.tile(vals, (4, 1))
        assert waic(ll).waic == pytest.approx(-2.0 * vals.sum(), abs=1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        ll = rng.normal(-2.0, 0.7, size=(50, 20))
        assert waic(ll).waic == pytest.approx(direct_waic(ll), rel=1e-10)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            waic(np.array([[1.0, np.inf]]))
        with pytest.raises(ValueError):
            waic(np.ones((1, 3)))


class TestPsisLoo:
    def test_identical_draws_equal_waic(self):
        vals = np.array([-1.0, -2.5, -0.3])
        ll = np.tile(vals, (200, 1))
        res = psis_loo(ll)
        assert res.loo == pytest.approx(waic(ll).waic, abs=1e-10)
        assert len(res.notes) == 3  # degenerate tails fall back with a note

    def test_loo_at_least_waic(self):
        rng = np.random.default_rng(1)
        for seed in range(5):
            ll = np.random.default_rng(seed).normal(-2.0, 0.5, size=(400, 15))
            assert psis_loo(ll).loo >= waic(ll).waic - 1e-6

    def test_conjugate_normal_mean_oracle(self):
        # Normal mean with known variance and conjugate prior: exact
        # leave-one-out predictive densities are available in closed form.
        rng = np.random.default_rng(2)
        sigma = 1.0
        tau0 = 2.0
        n = 3
        y = np.array([0.3, -0.9, 1.4])

        def exact_loo():
            total = 0.0
            for i in range(n):
                rest = np.delete(y, i)
                prec = 1 / tau0**2 + len(rest) / sigma**2
                post_var = 1 / prec
                post_mean = post_var * rest.sum() / sigma**2
                pred_var = post_var + sigma**2
                z = (y[i] - post_mean) ** 2 / pred_var
                total += -0.5 * math.log(2 * math.pi * pred_var) - 0.5 * z
            return -2.0 * total

        exact = exact_loo()
        # full-data posterior for the mean
        prec = 1 / tau0**2 + n / sigma**2
        post_var = 1 / prec
        post_mean = post_var * y.sum() / sigma**2
        estimates = []
        for rep in range(10):
            mu_draws = post_mean + math.sqrt(post_var) * rng.standard_normal(8000)
            ll = -0.5 * math.log(2 * math.pi * sigma**2) - 0.5 * (
                (y[None, :] - mu_draws[:, None]) / sigma
            ) ** 2
            estimates.append(psis_loo(ll).loo)
        estimates = np.array(estimates)
        mc_se = estimates.std(ddof=1) / math.sqrt(len(estimates))
        assert abs(estimates.mean() - exact) < 3 * mc_se + 1e-3

    def test_heavy_tail_flagged_and_smoothed(self):
        # construct importance ratios with a Pareto(k=1) right tail: the raw
        # weights are 1/p, so set log p = -log(ratio)
        rng = np.random.default_rng(3)
        s = 2000
        u = rng.random(s)
        ratios = (1.0 - u) ** -1.0  # GPD quantiles with shape 1
        ll_heavy = -np.log(ratios)
        ll = np.column_stack([rng.normal(-1.0, 0.1, s), ll_heavy])
        res = psis_loo(ll)

        def unsmoothed_loo(col):
            lw = -col - (-col).max()
            from scipy.special import logsumexp

            return logsumexp(lw + col) - logsumexp(lw)

        raw = -2.0 * (unsmoothed_loo(ll[:, 0]) + unsmoothed_loo(ll[:, 1]))
        assert res.pareto_k[1] > 0.7
        assert res.n_flagged >= 1
        assert abs(res.loo - raw) > 1e-6

    def test_warns_below_recommended_draws(self):
        rng = np.random.default_rng(4)
        ll = rng.normal(-1, 0.3, size=(50, 4))
        with pytest.warns(RuntimeWarning, match="100"):
            psis_loo(ll)


def toy_data(n_subjects=10, n_visits=4, rows=8, cols=8, trim=1, seed=0, missing_last=None):
    grid = build_inner_grid(rows, cols, trim)
    k_n = grid.n_superpixels
    rng = np.random.default_rng(seed)
    times = np.arange(n_visits) * 0.5
    subj, visit, kk, tt, yy = [], [], [], [], []
    for i in range(n_subjects):
        for j in range(n_visits):
            for k in range(k_n):
                if missing_last and j == n_visits - 1 and (i, k) in missing_last:
                    continue
                subj.append(i)
                visit.append(j)
                kk.append(k)
                tt.append(times[j])
                yy.append(70.0 + rng.normal(0, 2.0))
    return LongitudinalGridData(
        grid=grid,
        subject_ids=[f"p{i:03d}" for i in range(n_subjects)],
        visit_times=[times.copy() for _ in range(n_subjects)],
        subj=np.array(subj), visit=np.array(visit), k=np.array(kk),
        t=np.array(tt), y=np.array(yy),
    )


class TestHoldout:
    def test_full_grid_seven_per_subject(self):
        data = toy_data(n_subjects=10)
        plan, training = make_holdout(data, seed=5)
        assert plan.n_points == 70
        assert training.n_obs == data.n_obs - 70

    def test_publication_configuration(self):
        # 111 subjects on the 6x6 grid, one with only 32 available at the
        # last visit (contributing 6): 110 * 7 + 6 = 776 points
        missing = {(17, k) for k in range(4)}
        data = toy_data(n_subjects=111, missing_last=missing)
        plan, _ = make_holdout(data, seed=6)
        assert plan.n_points == 110 * 7 + 6 == 776

    def test_same_seed_same_plan(self):
        data = toy_data(n_subjects=6)
        plan1, _ = make_holdout(data, seed=9)
        plan2, _ = make_holdout(data, seed=9)
        assert plan1 == plan2

    def test_empty_last_visit_skipped(self):
        missing = {(2, k) for k in range(36)}
        data = toy_data(n_subjects=4, missing_last=missing)
        with pytest.warns(RuntimeWarning, match="skipped"):
            plan, _ = make_holdout(data, seed=1)
        assert plan.n_points == 3 * 7


def make_draws_for_prediction(data, values):
    """Single-draw PosteriorDraws holding the given parameter values."""
    names = list(values)
    groups = {nm: "test" for nm in names}
    chains = np.array([[list(values.values())]], dtype=float)
    return PosteriorDraws(names, groups, chains, np.array([1]))


class TestPrediction:
    def grid_data(self):
        grid = build_inner_grid(4, 4, 1)  # 2x2 grid: labels 2.2, 2.3, 3.2, 3.3
        times = np.array([0.0, 1.0])
        records = []
        for j in (0, 1):
            for k in range(4):
                records.append((j, k))
        subj = np.array([0] * 8)
        visit = np.array([r[0] for r in records])
        kk = np.array([r[1] for r in records])
        return LongitudinalGridData(
            grid=grid, subject_ids=["s1"], visit_times=[times],
            subj=subj, visit=visit, k=kk, t=times[visit],
            y=np.full(8, 70.0),
        )

    def test_all_effects_zero_predicts_global_field(self):
        from shreve.model import ModelSpec

        data = self.grid_data()
        spec = ModelSpec(visit_effects=False)
        values = {}
        for lab in data.grid.label_strings:
            values[f"alpha0[{lab}]"] = 70.0
            values[f"alpha1[{lab}]"] = 0.0
            values[f"beta0[s1,{lab}]"] = 0.0
            values[f"beta1[s1,{lab}]"] = 0.0
        draws = make_draws_for_prediction(data, values)
        plan, _ = make_holdout(data, seed=3, fraction=0.5, cap=2)
        preds = predict_heldout(draws, plan, data, spec)
        assert np.allclose(preds, 70.0)

    def test_kriging_matches_bivariate_normal_oracle(self):
        # 2 superpixels, one observed visit effect: the conditional of the
        # held-out effect is N(rho * c * g_obs / v, v (1 - rho^2-ish));
        # with covariance C = sd^2 [[1, r],[r, 1]] the kriging mean is
        # r * g_obs and the kriging variance sd^2 (1 - r^2).
        from shreve.evaluate import _gamma_conditional_draw

        sd_v, ell_v, h = 1.3, 2.0, 1.0
        r = math.exp(-h / ell_v)
        cov = sd_v**2 * np.array([[1.0, r], [r, 1.0]])
        g_obs = np.array([0.8])
        rng = np.random.default_rng(11)
        samples = np.array(
            [
                _gamma_conditional_draw(cov, np.array([0]), np.array([1]), g_obs, rng)[0]
                for _ in range(40000)
            ]
        )
        assert samples.mean() == pytest.approx(r * g_obs[0], abs=0.01)
        assert samples.var() == pytest.approx(sd_v**2 * (1 - r**2), rel=0.03)

    def test_perfect_correlation_limit(self):
        from shreve.evaluate import _gamma_conditional_draw

        cov = 2.0**2 * np.exp(-np.array([[0.0, 1.0], [1.0, 0.0]]) / 1e9)
        g_obs = np.array([1.23])
        rng = np.random.default_rng(12)
        val = _gamma_conditional_draw(cov, np.array([0]), np.array([1]), g_obs, rng)[0]
        assert val == pytest.approx(1.23, abs=1e-3)


class TestMspe:
    def test_perfect_and_biased(self):
        data = toy_data(n_subjects=3)
        plan, _ = make_holdout(data, seed=0)
        truth = []
        for (i, last, k) in plan.points:
            idx = np.flatnonzero((data.subj == i) & (data.visit == last) & (data.k == k))
            truth.append(data.y[idx[0]])
        truth = np.array(truth)
        perfect = np.tile(truth, (5, 1))
        assert mspe(perfect, plan, data) == 0.0
        assert mspe(perfect + 2.5, plan, data) == pytest.approx(2.5**2, abs=1e-12)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(5)
        data = toy_data(n_subjects=2)
        plan, _ = make_holdout(data, seed=0)
        preds = rng.normal(70, 3, size=(7, plan.n_points))
        expected = 0.0
        for s in range(preds.shape[0]):
            for j, (i, last, k) in enumerate(plan.points):
                idx = np.flatnonzero((data.subj == i) & (data.visit == last) & (data.k == k))
                expected += (data.y[idx[0]] - preds[s, j]) ** 2
        expected /= preds.size
        assert mspe(preds, plan, data) == pytest.approx(expected, rel=1e-12)

    def test_invariant_under_permutations(self):
        rng = np.random.default_rng(6)
        data = toy_data(n_subjects=2)
        plan, _ = make_holdout(data, seed=0)
        preds = rng.normal(70, 3, size=(9, plan.n_points))
        assert mspe(preds, plan, data) == pytest.approx(
            mspe(preds[rng.permutation(9)], plan, data), rel=1e-12
        )


class TestClassifySlopes:
    def make(self, slope_draws):
        grid = build_inner_grid(3, 3, 1)
        data = LongitudinalGridData(
            grid=grid, subject_ids=["s1"], visit_times=[np.array([0.0, 1.0])],
            subj=np.array([0, 0]), visit=np.array([0, 1]), k=np.array([0, 0]),
            t=np.array([0.0, 1.0]), y=np.array([70.0, 69.0]),
        )
        names = ["alpha1[2.2]", "beta1[s1,2.2]"]
        chains = np.zeros((1, len(slope_draws), 2))
        chains[0, :, 1] = slope_draws
        draws = PosteriorDraws(names, {n: "t" for n in names}, chains,
                               np.arange(1, len(slope_draws) + 1))
        return draws, data

    def test_all_negative(self):
        draws, data = self.make(np.full(100, -1.0))
        assert classify_slopes(draws, data)[("s1", "2.2")] == "negative"

    def test_symmetric_indeterminate(self):
        rng = np.random.default_rng(7)
        draws, data = self.make(rng.standard_normal(4000))
        assert classify_slopes(draws, data)[("s1", "2.2")] == "indeterminate"

    def test_quantile_boundary(self):
        # 97.5% quantile just below zero -> negative
        vals = np.concatenate([np.linspace(-3, -0.01, 975), np.linspace(0.0, 1.0, 25)])
        draws, data = self.make(vals)
        assert classify_slopes(draws, data)[("s1", "2.2")] == "negative"

    def test_time_rescaling_invariance(self):
        rng = np.random.default_rng(8)
        vals = rng.standard_normal(2000) - 1.1
        draws, data = self.make(vals)
        scaled, _ = self.make(vals * 4.0)
        assert classify_slopes(draws, data) == classify_slopes(scaled, data)
