import math

import numpy as np
import pytest
from scipy import integrate, stats

from shreve._workspace import ModelWorkspace
from shreve.data import LongitudinalGridData
from shreve.grid import build_inner_grid
from shreve.model import (
    ModelSpec,
    ParameterState,
    correlation_prior_logdensity,
    half_normal_logpdf,
    inverse_gamma_logpdf,
    log_likelihood,
    log_posterior,
    log_posterior_delta,
    log_prior,
    normal_logpdf,
    pointwise_log_likelihood,
    slr_fit,
    slr_posterior_draws,
)
from shreve.simulate import SimulationConfig, simulate


def small_sim(spec=None, seed=1, **kwargs):
    cfg = SimulationConfig(
        n_subjects=kwargs.pop("n_subjects", 3),
        n_visits=kwargs.pop("n_visits", 4),
        full_rows=4, full_cols=4, seed=seed,
        spec=spec or ModelSpec(),
        **kwargs,
    )
    return cfg, simulate(cfg)


class TestModelSpec:
    def test_ladder_names_round_trip(self):
        from shreve.model import MODEL_LADDER

        assert len(MODEL_LADDER) == 8
        for name in MODEL_LADDER:
            assert ModelSpec.from_name(name).name == name

    def test_flags(self):
        spec = ModelSpec.from_name("SHREVE-(ab)")
        assert spec.visit_effects and not spec.population_logsd and not spec.subject_logsd
        spec = ModelSpec.from_name("SHRE")
        assert not spec.visit_effects and spec.population_logsd and spec.subject_logsd

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            ModelSpec.from_name("SLR")


class TestLikelihood:
    def test_zero_residual_single_observation(self):
        grid = build_inner_grid(3, 3, 1)
        data = LongitudinalGridData(
            grid=grid, subject_ids=["a"], visit_times=[np.array([0.0])],
            subj=np.array([0]), visit=np.array([0]), k=np.array([0]),
            t=np.array([0.0]), y=np.array([70.0]),
        )
        spec = ModelSpec()
        state = ParameterState(
            mu0=70.0, mu1=0.0, mu_phi=0.0,
            sd_alpha=np.ones(3), ell_alpha=np.full(3, 2.0), R_alpha=np.eye(3),
            sd_beta=np.ones(3), ell_beta=np.full(3, 2.0), R_beta=np.eye(3),
            alpha=np.array([70.0, 0.0, 0.0]), beta=np.zeros((1, 3)),
            sd_v=1.0, ell_v=2.0, gamma=np.zeros(1),
        )
        # mean = alpha0 = 70 = y, log tau = phi + sigma = 0 -> tau = 1
        assert log_likelihood(state, data, spec) == pytest.approx(-0.5 * math.log(2 * math.pi))
        # doubling tau decreases the density by log 2
        state2 = state.copy()
        state2.alpha[2] = math.log(2.0)
        assert log_likelihood(state2, data, spec) == pytest.approx(
            -0.5 * math.log(2 * math.pi) - math.log(2.0)
        )

    def test_brute_force_oracle(self):
        cfg, res = small_sim()
        data, spec, state = res.data, cfg.spec, res.truth_state
        # independent direct summation over records
        total = 0.0
        for o in range(data.n_obs):
            i, k, t, y = data.subj[o], data.k[o], data.t[o], data.y[o]
            mean = (
                state.alpha[k * 3] + state.alpha[k * 3 + 1] * t
                + state.beta[i, k * 3] + state.beta[i, k * 3 + 1] * t
                + state.gamma[o]
            )
            tau = math.exp(state.alpha[k * 3 + 2] + state.beta[i, k * 3 + 2])
            total += stats.norm.logpdf(y, mean, tau)
        assert log_likelihood(state, data, spec) == pytest.approx(total, rel=1e-12)
        assert pointwise_log_likelihood(state, data, spec).sum() == pytest.approx(total, rel=1e-12)


class TestPriors:
    def test_inverse_gamma_moments_by_quadrature(self):
        # the lengthscale prior IG(2.25, 2.5) has mean 2 and SD 4
        pdf = lambda x: math.exp(inverse_gamma_logpdf(x, 2.25, 2.5))
        mass, _ = integrate.quad(pdf, 0, np.inf, limit=200)
        mean, _ = integrate.quad(lambda x: x * pdf(x), 0, np.inf, limit=200)
        second, _ = integrate.quad(lambda x: x * x * pdf(x), 0, np.inf, limit=500)
        assert mass == pytest.approx(1.0, abs=1e-6)
        assert mean == pytest.approx(2.0, abs=1e-6)
        assert math.sqrt(second - mean**2) == pytest.approx(4.0, abs=1e-4)

    def test_support_boundaries(self):
        assert inverse_gamma_logpdf(0.0, 2.25, 2.5) == -math.inf
        assert inverse_gamma_logpdf(-1.0, 2.25, 2.5) == -math.inf
        assert half_normal_logpdf(0.0, 2.5) == -math.inf
        assert half_normal_logpdf(-0.5, 2.5) == -math.inf

    def test_half_normal_integrates_to_one(self):
        pdf = lambda x: math.exp(half_normal_logpdf(x, 2.5))
        mass, _ = integrate.quad(pdf, 0, np.inf)
        assert mass == pytest.approx(1.0, abs=1e-8)

    def test_prior_term_by_term_oracle(self):
        # pin a state and verify log_prior against an independent
        # term-by-term evaluation with scipy distributions
        cfg, res = small_sim(seed=3)
        data, spec, state = res.data, cfg.spec, res.truth_state
        pc = spec.priors
        expected = (
            stats.norm.logpdf(state.mu0, pc.mu0_mean, pc.mu0_sd)
            + stats.norm.logpdf(state.mu1, pc.mu1_mean, pc.mu1_sd)
            + stats.norm.logpdf(state.mu_phi, pc.mu_phi_mean, pc.mu_phi_sd)
        )
        for sd_vec, ell_vec, corr in (
            (state.sd_alpha, state.ell_alpha, state.R_alpha),
            (state.sd_beta, state.ell_beta, state.R_beta),
        ):
            for p in range(3):
                scale = 10.0 if p == 0 else 2.5
                expected += stats.halfnorm.logpdf(sd_vec[p], scale=scale)
                expected += stats.invgamma.logpdf(ell_vec[p], 2.25, scale=2.5)
            expected += correlation_prior_logdensity(corr)
        expected += stats.halfnorm.logpdf(state.sd_v, scale=2.5)
        expected += stats.invgamma.logpdf(state.ell_v, 2.25, scale=2.5)

        from shreve import kernels
        from shreve.grid import pairwise_distances

        dist = pairwise_distances(data.grid)
        for sd_vec, ell_vec, corr, vec, mean in (
            (state.sd_alpha, state.ell_alpha, state.R_alpha, state.alpha,
             np.tile([state.mu0, state.mu1, state.mu_phi], data.grid.n_superpixels)),
        ):
            mspec = kernels.MultiMaternSpec(sd=sd_vec, nu=np.full(3, 0.5), ell=ell_vec, corr=corr)
            cov = kernels.add_jitter(kernels.assemble_cross_covariance(mspec, dist))
            expected += stats.multivariate_normal.logpdf(vec, mean=mean, cov=cov)
        mspec_b = kernels.MultiMaternSpec(
            sd=state.sd_beta, nu=np.full(3, 0.5), ell=state.ell_beta, corr=state.R_beta
        )
        cov_b = kernels.add_jitter(kernels.assemble_cross_covariance(mspec_b, dist))
        for i in range(data.n_subjects):
            expected += stats.multivariate_normal.logpdf(
                state.beta[i], mean=np.zeros(cov_b.shape[0]), cov=cov_b
            )
        cov_v = kernels.add_jitter(
            kernels.assemble_univariate_covariance(
                kernels.MaternParams(0.5, state.ell_v, state.sd_v), dist
            )
        )
        k_n = data.grid.n_superpixels
        for start in range(0, data.n_obs, k_n):
            expected += stats.multivariate_normal.logpdf(
                state.gamma[start:start + k_n], mean=np.zeros(k_n), cov=cov_v
            )
        assert log_prior(state, data, spec) == pytest.approx(expected, rel=1e-9)

    def test_out_of_support(self):
        cfg, res = small_sim(seed=4)
        state = res.truth_state.copy()
        state.ell_beta[1] = -0.5
        assert log_prior(state, res.data, cfg.spec) == -math.inf
        state = res.truth_state.copy()
        state.sd_v = 0.0
        assert log_prior(state, res.data, cfg.spec) == -math.inf


class TestCorrelationPrior:
    def test_p2_marginal_is_flat(self):
        vals = [correlation_prior_logdensity(np.array([[1.0, r], [r, 1.0]]))
                for r in (-0.9, -0.3, 0.0, 0.5, 0.95)]
        assert np.allclose(vals, vals[0])

    def test_non_pd_rejected(self):
        bad = np.array([[1.0, 0.8, -0.8], [0.8, 1.0, 0.8], [-0.8, 0.8, 1.0]])
        assert correlation_prior_logdensity(bad) == -math.inf
        singular = np.array([[1.0, 1.0], [1.0, 1.0]])
        assert correlation_prior_logdensity(singular) == -math.inf

    def test_interior_point_finite(self):
        assert math.isfinite(correlation_prior_logdensity(np.eye(3)))

    def test_invalid_input_rejected(self):
        with pytest.raises(ValueError):
            correlation_prior_logdensity(np.array([[2.0, 0.0], [0.0, 1.0]]))
        with pytest.raises(ValueError):
            correlation_prior_logdensity(np.array([[1.0, 0.5], [0.4, 1.0]]))

    def test_marginals_uniform_by_independence_mh(self):
        # sample the implemented density with an independence sampler
        # (uniform proposals on the free correlations) and compare each
        # marginal against Uniform(-1, 1
        rng = np.random.default_rng(5)
        current = np.eye(3)
        current_lp = correlation_prior_logdensity(current)
        kept = []
        for it in range(40000):
            r12, r13, r23 = rng.uniform(-1, 1, 3)
            prop = np.array([[1.0, r12, r13], [r12, 1.0, r23], [r13, r23, 1.0]])
            lp = correlation_prior_logdensity(prop)
            if math.log(rng.random()) < lp - current_lp:
                current, current_lp = prop, lp
            if it % 10 == 0:
                kept.append((current[0, 1], current[0, 2], current[1, 2]))
        kept = np.array(kept[200:])
        for col in range(3):
            stat, pvalue = stats.kstest(kept[:, col], stats.uniform(-1, 2).cdf)
            assert pvalue > 0.001


class TestPosterior:
    def test_posterior_is_likelihood_plus_prior(self):
        rng = np.random.default_rng(6)
        cfg, res = small_sim(seed=7)
        data, spec = res.data, cfg.spec
        for rep in range(5):
            state = res.truth_state.copy()
            state.alpha = state.alpha + rng.normal(0, 0.5, state.alpha.shape)
            state.beta = state.beta + rng.normal(0, 0.5, state.beta.shape)
            state.gamma = state.gamma + rng.normal(0, 0.5, state.gamma.shape)
            state.mu0 += rng.normal(0, 2)
            lp = log_posterior(state, data, spec)
            assert lp == pytest.approx(
                log_likelihood(state, data, spec) + log_prior(state, data, spec), rel=1e-10
            )

    def test_degenerate_state_identity(self):
        # all random effects zero: mean is mu0 + mu1 t, residual SD exp(mu_phi)
        cfg, res = small_sim(seed=8)
        data, spec = res.data, cfg.spec
        state = res.truth_state.copy()
        state.beta[:] = 0.0
        state.gamma[:] = 0.0
        mu = np.array([state.mu0, state.mu1, state.mu_phi])
        state.alpha = np.tile(mu, data.grid.n_superpixels)
        ll = pointwise_log_likelihood(state, data, spec)
        mean = state.mu0 + state.mu1 * data.t
        tau = math.exp(state.mu_phi)
        expected = stats.norm.logpdf(data.y, mean, tau)
        assert np.allclose(ll, expected, rtol=1e-12)

    def test_visit_effect_toggle_identity(self):
        # SHREVE posterior at gamma = 0 equals the SHRE posterior plus the
        # gamma prior at zero plus the visit-kernel hyperpriors
        cfg, res = small_sim(seed=9)
        data = res.data
        full = cfg.spec
        state = res.truth_state.copy()
        state.gamma[:] = 0.0
        shre = ModelSpec(visit_effects=False)
        state_shre = state.copy()
        state_shre.sd_v = state_shre.ell_v = None
        state_shre.gamma = None

        lp_full = log_posterior(state, data, full)
        lp_shre = log_posterior(state_shre, data, shre)
        from shreve import kernels
        from shreve.grid import pairwise_distances

        cov_v = kernels.add_jitter(
            kernels.assemble_univariate_covariance(
                kernels.MaternParams(0.5, state.ell_v, state.sd_v),
                pairwise_distances(data.grid),
            )
        )
        k_n = data.grid.n_superpixels
        sign, logdet = np.linalg.slogdet(cov_v)
        n_visits = data.n_obs // k_n
        gamma_prior_at_zero = n_visits * (-0.5 * (logdet + k_n * math.log(2 * math.pi)))
        hyper_priors = stats.halfnorm.logpdf(state.sd_v, scale=2.5) + stats.invgamma.logpdf(
            state.ell_v, 2.25, scale=2.5
        )
        assert lp_full == pytest.approx(lp_shre + gamma_prior_at_zero + hyper_priors, rel=1e-10)

    def test_separability_with_identity_correlation(self):
        # R = I and equal lengthscales: the multivariate prior factorizes
        # into three univariate GP priors
        cfg, res = small_sim(seed=10)
        data, spec = res.data, cfg.spec
        state = res.truth_state.copy()
        state.R_alpha = np.eye(3)
        state.ell_alpha = np.full(3, 2.5)
        from shreve import kernels
        from shreve.grid import pairwise_distances

        dist = pairwise_distances(data.grid)
        mspec = kernels.MultiMaternSpec(
            sd=state.sd_alpha, nu=np.full(3, 0.5), ell=state.ell_alpha, corr=np.eye(3)
        )
        cov = kernels.add_jitter(kernels.assemble_cross_covariance(mspec, dist))
        mean = np.tile([state.mu0, state.mu1, state.mu_phi], data.grid.n_superpixels)
        joint = stats.multivariate_normal.logpdf(state.alpha, mean=mean, cov=cov)
        split = 0.0
        for p, mu_p in enumerate((state.mu0, state.mu1, state.mu_phi)):
            cov_p = kernels.add_jitter(
                kernels.assemble_univariate_covariance(
                    kernels.MaternParams(0.5, state.ell_alpha[p], state.sd_alpha[p]), dist
                )
            )
            split += stats.multivariate_normal.logpdf(
                state.alpha[p::3], mean=np.full(data.grid.n_superpixels, mu_p), cov=cov_p
            )
        assert joint == pytest.approx(split, rel=1e-10)


class TestPosteriorDelta:
    def test_null_proposal_zero(self):
        cfg, res = small_sim(seed=11)
        ws = ModelWorkspace(res.data, cfg.spec)
        ws.load_state(res.truth_state)
        assert ws.posterior_delta(np.array([0]), np.array([0.0])) == 0.0

    @pytest.mark.parametrize("names,shift", [
        (["beta0[s001,2.2]"], 0.8),
        (["beta0[s002,2.3]", "beta1[s002,2.3]"], -0.4),
        (["alpha0[3.3]", "alpha1[3.3]", "phi[3.3]"], 0.2),
        (["sigma_subj[s001,2.2]"], 0.3),
    ])
    def test_effect_block_matches_full_recompute(self, names, shift):
        cfg, res = small_sim(seed=12)
        data, spec, state = res.data, cfg.spec, res.truth_state
        current = dict(zip(
            ["mu0"], [0]
        ))
        from shreve._workspace import named_vector_of

        values = named_vector_of(state, data, spec)
        proposed = {nm: values[nm] + shift for nm in names}
        delta = log_posterior_delta(state, proposed, data, spec)
        new_state = state.copy()
        pa, pb = spec.p_alpha, spec.p_beta
        labs = data.grid.label_strings
        for nm in names:
            kind, rest = nm.split("[", 1)
            parts = rest.rstrip("]").split(",")
            if kind.startswith("alpha") or kind == "phi":
                k = labs.index(parts[0])
                p = {"alpha0": 0, "alpha1": 1, "phi": 2}[kind]
                new_state.alpha[k * pa + p] += shift
            else:
                i = data.subject_ids.index(parts[0])
                k = labs.index(parts[1])
                p = {"beta0": 0, "beta1": 1, "sigma_subj": 2}[kind]
                new_state.beta[i, k * pb + p] += shift
        full = log_posterior(new_state, data, spec) - log_posterior(state, data, spec)
        assert delta == pytest.approx(full, rel=1e-8, abs=1e-8)

    def test_gamma_block_matches_full_recompute(self):
        cfg, res = small_sim(seed=13)
        data, spec, state = res.data, cfg.spec, res.truth_state
        ws = ModelWorkspace(data, spec)
        ws.load_state(state)
        idx = np.array([ws.gamma_off + 3, ws.gamma_off + 4])
        deltas = np.array([0.7, -0.2])
        delta = ws.posterior_delta(idx, deltas)
        new_state = state.copy()
        new_state.gamma[3] += 0.7
        new_state.gamma[4] -= 0.2
        full = log_posterior(new_state, data, spec) - log_posterior(state, data, spec)
        assert delta == pytest.approx(full, rel=1e-8, abs=1e-8)

    @pytest.mark.parametrize("changes", [
        {"sigma_beta_22": 1.1},
        {"ell_alpha_1": 3.1, "sigma_alpha_11": 9.0},
        {"R_beta_12": 0.05},
        {"sigma_v": 1.2, "ell_v": 2.8},
        {"sigma_beta_33": 0.5, "ell_v": 4.0},
        {"mu0": 71.5},
        {"mu_phi": 0.5},
    ])
    def test_hyper_and_global_matches_full_recompute(self, changes):
        cfg, res = small_sim(seed=14)
        data, spec, state = res.data, cfg.spec, res.truth_state
        delta = log_posterior_delta(state, changes, data, spec)
        new_state = state.copy()
        for nm, val in changes.items():
            if nm in ("mu0", "mu1", "mu_phi"):
                setattr(new_state, nm, val)
            elif nm == "sigma_v":
                new_state.sd_v = val
            elif nm == "ell_v":
                new_state.ell_v = val
            elif nm.startswith("sigma_"):
                side, which = nm.split("_")[1:]
                getattr(new_state, f"sd_{side}")[int(which[0]) - 1] = val
            elif nm.startswith("ell_"):
                side, which = nm.split("_")[1:]
                getattr(new_state, f"ell_{side}")[int(which) - 1] = val
            else:
                _, side, which = nm.split("_")
                mat = getattr(new_state, f"R_{side}")
                p, q = int(which[0]) - 1, int(which[1]) - 1
                mat[p, q] = mat[q, p] = val
        full = log_posterior(new_state, data, spec) - log_posterior(state, data, spec)
        assert delta == pytest.approx(full, rel=1e-7, abs=1e-7)

    def test_mu_phi_without_population_logsd(self):
        spec = ModelSpec(population_logsd=False)
        cfg, res = small_sim(spec=spec, seed=15)
        data, state = res.data, res.truth_state
        delta = log_posterior_delta(state, {"mu_phi": 0.9}, data, spec)
        new_state = state.copy()
        new_state.mu_phi = 0.9
        full = log_posterior(new_state, data, spec) - log_posterior(state, data, spec)
        assert delta == pytest.approx(full, rel=1e-8)


class TestSlr:
    def test_hand_computed_example(self):
        fit = slr_fit(np.array([1.0, 2.0, 4.0]), np.array([0.0, 1.0, 2.0]))
        assert fit.slope == pytest.approx(1.5)
        assert fit.intercept == pytest.approx(5.0 / 6.0)

    def test_exact_linear_degenerate_interval(self):
        t = np.array([0.0, 0.5, 1.0, 1.5])
        y = 3.0 - 0.7 * t
        fit = slr_fit(y, t)
        assert fit.slope == pytest.approx(-0.7, abs=1e-12)
        assert fit.resid_sd == pytest.approx(0.0, abs=1e-7)
        lo, hi = fit.slope_interval
        assert hi - lo == pytest.approx(0.0, abs=1e-6)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(16)
        t = np.array([0.0, 0.5, 1.0, 1.5, 2.0])
        y = 70 - 0.5 * t + rng.normal(0, 1, 5)
        fit = slr_fit(y, t)
        perm = rng.permutation(5)
        fit2 = slr_fit(y[perm], t[perm])
        assert fit.slope == pytest.approx(fit2.slope)
        assert fit.intercept == pytest.approx(fit2.intercept)
        assert fit.resid_sd == pytest.approx(fit2.resid_sd)

    def test_degenerate_design_rejected(self):
        with pytest.raises(ValueError):
            slr_fit(np.array([1.0, 2.0, 3.0]), np.array([1.0, 1.0, 1.0]))
        with pytest.raises(ValueError):
            slr_fit(np.array([1.0, 2.0]), np.array([0.0, 1.0]))

    def test_posterior_draws_cover_classical_estimates(self):
        rng = np.random.default_rng(17)
        t = np.arange(8) * 0.5
        y = 70 - 0.8 * t + rng.normal(0, 1.5, 8)
        fit = slr_fit(y, t)
        intercepts, slopes, sigmas = slr_posterior_draws(y, t, 40000, rng)
        assert slopes.mean() == pytest.approx(fit.slope, abs=0.03)
        # flat-prior slope posterior quantiles match the t interval
        lo, hi = np.quantile(slopes, [0.025, 0.975])
        assert lo == pytest.approx(fit.slope_interval[0], abs=0.08)
        assert hi == pytest.approx(fit.slope_interval[1], abs=0.08)


class TestStateSnapshot:
    def test_round_trip(self, tmp_path):
        from shreve.model import load_state, save_state

        cfg, res = small_sim(seed=18)
        from shreve._workspace import build_param_names, head_values_of, theta_of

        head, names, _ = build_param_names(res.data, cfg.spec)
        values = np.concatenate(
            [head_values_of(res.truth_state, cfg.spec), theta_of(res.truth_state, cfg.spec)]
        )
        path = tmp_path / "state.csv"
        save_state(res.truth_state, head + names, values, path, cfg.spec.name)
        got_names, got_values, meta = load_state(path)
        assert got_names == head + names
        assert np.array_equal(got_values, values)
        assert meta["model"] == "SHREVE"
