"""Metropolis-within-Gibbs engine for SHREVE-family models.

One sweep over the sampler plan updates, in order: the three global scalars
by adaptive scalar random walks; each kernel hyperparameter (SD, lengthscale)
pair by an adaptive joint random walk, with the full model pairing the
subject log-SD GP SD with the visit lengthscale under the automated factor
slice sampler and the visit SD with the subject log-SD lengthscale under a
joint random walk; the free correlations of each cross-correlation matrix
jointly; and the latent effects by compiled sub-block random-walk sweeps
(per-superpixel population triplets; per-superpixel subject intercept/slope
pairs joined by that superpixel's first-visit effect; subject log-SD offsets
in sub-blocks of 6; remaining visit effects in sub-blocks of 3).

Proposal scales and covariances adapt toward 0.44 (scalar) / 0.234 (block)
acceptance during burn-in and freeze afterwards, so retained draws come from
a fixed transition kernel. Chains are independent workers seeded from one
root seed; results are bit-reproducible for a given (seed, config, data)
regardless of worker count or engine backend.
"""
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import multiprocessing as mp

import numpy as np

from . import core, model
from ._mp import limit_blas_threads
from ._workspace import ModelWorkspace
from .draws import PosteriorDraws

__all__ = [
    "ChainConfig",
    "SamplerPlan",
    "UnitSpec",
    "ScalarRandomWalk",
    "BlockRandomWalk",
    "FactorSliceSampler",
    "InitializationError",
    "default_plan",
    "initialize_state",
    "run_chain",
    "fit",
]


class InitializationError(RuntimeError):
    """No valid starting state could be constructed."""


@dataclass(frozen=True)
class ChainConfig:
    """Chain count, length, and adaptation settings.

    The desk-scale defaults (4 chains of 20,000 with 5,000 burn-in, thin 10)
    suit simulation studies; production-scale settings (e.g. 9 chains of
    250,000, burn-in 30,000, thin 100) are plain config values.
    """

    n_chains: int = 4
    n_iterations: int = 20000
    burn_in: int = 5000
    thin: int = 10
    seed: int = 0
    adapt_interval: int = 50
    cache_refresh: int = 200
    init: str = "slr-warm"
    afss_factor_refresh: int = 200
    afss_max_stepout: int = 50
    record_loglik: bool = True

    def __post_init__(self):
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.n_iterations and self.burn_in >= self.n_iterations:
            raise ValueError("burn_in must be smaller than n_iterations")

    @property
    def n_keep(self):
        return max(0, (self.n_iterations - self.burn_in) // self.thin)


def _adapt_rate(iteration):
    return min(0.25, 1.5 * iteration ** -0.6)


# ---------------------------------------------------------------------------
# generic kernels (also used standalone on toy targets in tests)
# ---------------------------------------------------------------------------


class ScalarRandomWalk:
    """Adaptive scalar random-walk Metropolis kernel, target acceptance 0.44."""

    def __init__(self, scale=1.0, target=0.44):
        self.log_scale = math.log(scale)
        self.target = target
        self.n_prop = 0
        self.n_acc = 0

    def step(self, x, logpdf, rng, eta=0.0):
        prop = x + math.exp(self.log_scale) * rng.standard_normal()
        accept = math.log(rng.random()) < logpdf(prop) - logpdf(x)
        self.n_prop += 1
        if accept:
            self.n_acc += 1
            x = prop
        if eta:
            self.log_scale += eta * ((1.0 if accept else 0.0) - self.target)
        return x, accept

    def get_state(self):
        return {"log_scale": self.log_scale, "n_prop": self.n_prop, "n_acc": self.n_acc}

    def set_state(self, state):
        self.log_scale = state["log_scale"]
        self.n_prop = state["n_prop"]
        self.n_acc = state["n_acc"]


class _RunningCov:
    """Welford mean/covariance accumulator."""

    def __init__(self, ndim):
        self.ndim = ndim
        self.count = 0
        self.mean = np.zeros(ndim)
        self.m2 = np.zeros((ndim, ndim))

    def update(self, x):
        self.count += 1
        d1 = x - self.mean
        self.mean += d1 / self.count
        d2 = x - self.mean
        self.m2 += np.outer(d1, d2)

    def cov(self):
        if self.count < 2:
            return np.eye(self.ndim)
        return self.m2 / (self.count - 1)

    def get_state(self):
        return {"count": self.count, "mean": self.mean.copy(), "m2": self.m2.copy()}

    def set_state(self, state):
        self.count = state["count"]
        self.mean = state["mean"].copy()
        self.m2 = state["m2"].copy()


def _ridge_chol(cov):
    d = cov.shape[0]
    ridge = 1e-6 * float(np.trace(cov)) / d + 1e-12
    return np.linalg.cholesky(cov + ridge * np.eye(d))


class BlockRandomWalk:
    """Adaptive multivariate random walk with empirical-covariance proposals."""

    def __init__(self, ndim, init_scales=None, target=0.234):
        self.ndim = ndim
        self.target = target
        scales = np.ones(ndim) if init_scales is None else np.asarray(init_scales, dtype=float)
        self.chol = np.diag(scales)
        self.log_lam = math.log(2.38 / math.sqrt(ndim))
        self.running = _RunningCov(ndim)
        self.n_prop = 0
        self.n_acc = 0

    def propose(self, x, rng):
        return x + math.exp(self.log_lam) * (self.chol @ rng.standard_normal(self.ndim))

    def adapt(self, x, accepted, eta):
        self.running.update(np.asarray(x, dtype=float))
        if eta:
            self.log_lam += eta * ((1.0 if accepted else 0.0) - self.target)
            self.log_lam = min(max(self.log_lam, -12.0), 6.0)

    def refresh(self):
        if self.running.count >= 2 * self.ndim + 5:
            try:
                self.chol = _ridge_chol(self.running.cov())
            except np.linalg.LinAlgError:
                pass

    def step(self, x, logpdf, rng, eta=0.0):
        x = np.asarray(x, dtype=float)
        prop = self.propose(x, rng)
        accept = math.log(rng.random()) < logpdf(prop) - logpdf(x)
        self.n_prop += 1
        if accept:
            self.n_acc += 1
            x = prop
        self.adapt(x, accept, eta)
        return x, accept

    def get_state(self):
        return {
            "chol": self.chol.copy(), "log_lam": self.log_lam,
            "running": self.running.get_state(),
            "n_prop": self.n_prop, "n_acc": self.n_acc,
        }

    def set_state(self, state):
        self.chol = state["chol"].copy()
        self.log_lam = state["log_lam"]
        self.running.set_state(state["running"])
        self.n_prop = state["n_prop"]
        self.n_acc = state["n_acc"]


class FactorSliceSampler:
    """Slice sampling along adaptively estimated orthogonal factor directions.

    Directions are the eigenvectors of the running empirical covariance,
    refreshed every ``factor_refresh`` updates during adaptation; the initial
    stepping-out width along each factor is twice the running SD in that
    direction. Stepping out is capped with random apportioning of the
    expansion budget, which keeps the update exact; saturated brackets are
    counted and reported rather than silently ignored.
    """

    def __init__(self, ndim, widths=None, factor_refresh=200, max_stepout=50, name=""):
        self.ndim = ndim
        self.name = name
        self.factor_refresh = factor_refresh
        self.max_stepout = max_stepout
        self.directions = np.eye(ndim)
        self.widths = np.ones(ndim) if widths is None else np.asarray(widths, dtype=float)
        self.running = _RunningCov(ndim)
        self.n_updates = 0
        self.n_evals = 0
        self.bracket_saturated = 0

    def _slice_along(self, x, fx, direction, width, logf, rng):
        logy = fx + math.log(rng.random())
        lo = -width * rng.random()
        hi = lo + width
        budget_lo = int(math.floor(self.max_stepout * rng.random()))
        budget_hi = self.max_stepout - 1 - budget_lo
        while budget_lo > 0:
            self.n_evals += 1
            if logf(x + lo * direction) > logy:
                lo -= width
                budget_lo -= 1
                if budget_lo == 0:
                    self.bracket_saturated += 1
            else:
                break
        while budget_hi > 0:
            self.n_evals += 1
            if logf(x + hi * direction) > logy:
                hi += width
                budget_hi -= 1
                if budget_hi == 0:
                    self.bracket_saturated += 1
            else:
                break
        while True:
            eta = lo + (hi - lo) * rng.random()
            trial = x + eta * direction
            self.n_evals += 1
            ft = logf(trial)
            if ft > logy:
                return trial, ft
            if hi - lo < 1e-13 * (width + 1e-13):
                # shrinkage collapsed numerically; keep the current point
                return x, fx
            if eta < 0:
                lo = eta
            else:
                hi = eta

    def update(self, x, logf, rng, adapt=True):
        x = np.array(x, dtype=float)
        self.n_evals += 1
        fx = logf(x)
        if not math.isfinite(fx):
            raise ValueError(f"slice sampler {self.name or ''} started outside the support")
        for r in range(self.ndim):
            x, fx = self._slice_along(
                x, fx, self.directions[:, r], self.widths[r], logf, rng
            )
        self.n_updates += 1
        if adapt:
            self.running.update(x)
            if self.running.count >= max(2 * self.ndim + 2, 10) and (
                self.n_updates % self.factor_refresh == 0 or self.n_updates == 25
            ):
                self.refresh_factors()
        return x

    def refresh_factors(self):
        eigvals, eigvecs = np.linalg.eigh(self.running.cov())
        floor = max(eigvals.max(), 0.0) * 1e-12 + 1e-20
        self.directions = eigvecs
        self.widths = 2.0 * np.sqrt(np.maximum(eigvals, floor))

    def get_state(self):
        return {
            "directions": self.directions.copy(), "widths": self.widths.copy(),
            "running": self.running.get_state(), "n_updates": self.n_updates,
            "n_evals": self.n_evals, "bracket_saturated": self.bracket_saturated,
        }

    def set_state(self, state):
        self.directions = state["directions"].copy()
        self.widths = state["widths"].copy()
        self.running.set_state(state["running"])
        self.n_updates = state["n_updates"]
        self.n_evals = state["n_evals"]
        self.bracket_saturated = state["bracket_saturated"]


# ---------------------------------------------------------------------------
# update units over the model workspace
# ---------------------------------------------------------------------------


class GlobalScalarUnit:
    kind = "scalar_rw"

    def __init__(self, name, scale):
        self.name = f"global:{name}"
        self.param = name
        self.kernel = ScalarRandomWalk(scale=scale)

    def covered_params(self, ws):
        return [self.param]

    def step(self, ws, rng, eta):
        x = getattr(ws.state, self.param)
        prop = x + math.exp(self.kernel.log_scale) * rng.standard_normal()
        delta, payload = ws.global_delta(self.param, prop)
        accept = math.log(rng.random()) < delta
        self.kernel.n_prop += 1
        if accept:
            self.kernel.n_acc += 1
            ws.commit_global(payload)
        if eta:
            self.kernel.log_scale += eta * ((1.0 if accept else 0.0) - self.kernel.target)

    def refresh_proposals(self):
        pass

    def stats(self):
        k = self.kernel
        return {"proposals": k.n_prop, "accepts": k.n_acc,
                "rate": k.n_acc / max(1, k.n_prop)}

    def get_state(self):
        return self.kernel.get_state()

    def set_state(self, state):
        self.kernel.set_state(state)


class HyperBlockUnit:
    """Joint random-walk update of a set of hyperparameters."""

    kind = "block_rw"

    def __init__(self, names, init_scales):
        self.names = tuple(names)
        self.name = "pair:" + "+".join(names)
        self.kernel = BlockRandomWalk(len(names), init_scales=init_scales)

    def covered_params(self, ws):
        return list(self.names)

    def _current(self, ws):
        head = dict(zip(ws.head_names, ws.head_values()))
        return np.array([head[nm] for nm in self.names])

    def step(self, ws, rng, eta):
        x = self._current(ws)
        prop = self.kernel.propose(x, rng)
        delta, payload = ws.hyper_delta(dict(zip(self.names, prop)))
        accept = payload is not None and math.log(rng.random()) < delta
        self.kernel.n_prop += 1
        if accept:
            self.kernel.n_acc += 1
            ws.commit_hyper(payload)
            x = prop
        self.kernel.adapt(x, accept, eta)

    def refresh_proposals(self):
        self.kernel.refresh()

    def stats(self):
        k = self.kernel
        return {"proposals": k.n_prop, "accepts": k.n_acc,
                "rate": k.n_acc / max(1, k.n_prop)}

    def get_state(self):
        return self.kernel.get_state()

    def set_state(self, state):
        self.kernel.set_state(state)


class HyperSliceUnit:
    """Automated factor slice sampler over a set of hyperparameters."""

    kind = "afss"

    def __init__(self, names, init_widths, factor_refresh, max_stepout):
        self.names = tuple(names)
        self.name = "afss:" + "+".join(names)
        self.kernel = FactorSliceSampler(
            len(names), widths=init_widths, factor_refresh=factor_refresh,
            max_stepout=max_stepout, name=self.name,
        )
        self._warned = False

    def covered_params(self, ws):
        return list(self.names)

    def step(self, ws, rng, eta):
        head = dict(zip(ws.head_names, ws.head_values()))
        x0 = np.array([head[nm] for nm in self.names])

        def logf(x):
            delta, _ = ws.hyper_delta(dict(zip(self.names, x)))
            return delta

        saturated_before = self.kernel.bracket_saturated
        x1 = self.kernel.update(x0, logf, rng, adapt=bool(eta))
        if self.kernel.bracket_saturated > saturated_before and not self._warned:
            warnings.warn(
                f"{self.name}: slice bracketing hit the expansion cap at state {x1}",
                RuntimeWarning,
            )
            self._warned = True
        if not np.array_equal(x1, x0):
            delta, payload = ws.hyper_delta(dict(zip(self.names, x1)))
            if payload is None:  # pragma: no cover - slice only accepts in-support points
                raise RuntimeError(f"{self.name}: accepted point left the support")
            ws.commit_hyper(payload)

    def refresh_proposals(self):
        pass

    def stats(self):
        k = self.kernel
        return {"updates": k.n_updates, "evals": k.n_evals,
                "bracket_saturated": k.bracket_saturated}

    def get_state(self):
        return self.kernel.get_state()

    def set_state(self, state):
        self.kernel.set_state(state)


class SweepUnit:
    """Compiled random-walk sweep over one family of effect sub-blocks."""

    kind = "sweep"

    def __init__(self, tables, target=0.234):
        self.tables = tables
        self.name = f"sweep:{tables.name}"
        self.target = target
        nb = tables.n_blocks
        self.lam = np.empty(nb)
        for b in range(nb):
            d = tables.b_ptr[b + 1] - tables.b_ptr[b]
            self.lam[b] = 2.38 / math.sqrt(d)
        self.prop_chol = np.zeros(tables.total_packed)
        for b in range(nb):
            off, coff = tables.b_ptr[b], tables.b_choloff[b]
            d = tables.b_ptr[b + 1] - off
            for i in range(d):
                self.prop_chol[coff + i * d + i] = tables.init_scales[off + i]
        self.w_count = np.zeros(nb, dtype=np.int64)
        self.w_mean = np.zeros(tables.total_slots)
        self.w_m2 = np.zeros(tables.total_packed)
        self.acc = np.zeros(nb, dtype=np.uint8)
        self.n_prop = 0
        self.n_acc = 0
        self._by_dim = {}
        for b in range(nb):
            d = int(tables.b_ptr[b + 1] - tables.b_ptr[b])
            self._by_dim.setdefault(d, []).append(b)
        self._by_dim = {
            d: (np.array(blocks, dtype=np.int64),
                tables.b_ptr[np.array(blocks, dtype=np.int64)],
                tables.b_choloff[np.array(blocks, dtype=np.int64)])
            for d, blocks in self._by_dim.items()
        }

    def covered_params(self, ws):
        return [ws.param_names[len(ws.head_names) + p] for p in self.tables.b_params]

    def step(self, ws, rng, eta):
        t = self.tables
        z = rng.standard_normal(t.total_slots)
        logu = np.log(rng.random(t.n_blocks))
        n_acc = core.sweep_blocks(
            ws.theta, ws.v, ws.q_flat, ws.g_voff, ws.g_dim, ws.g_qoff,
            ws.pgroup, ws.pgidx,
            ws.pm_ptr, ws.pm_obs, ws.pm_coef, ws.ps_ptr, ws.ps_obs,
            t.b_ptr, t.b_params, t.b_choloff,
            self.prop_chol, self.lam,
            ws.data.y, ws.mean, ws.logsd, ws.inv_sd, ws.g_quad,
            z, logu, self.acc,
            self.w_count, self.w_mean, self.w_m2,
            ws.sc_dm, ws.sc_ds, ws.sc_touch, ws.sc_flag,
        )
        self.n_prop += t.n_blocks
        self.n_acc += int(n_acc)
        if eta:
            np.multiply(
                self.lam, np.exp(eta * (self.acc.astype(float) - self.target)), out=self.lam
            )
            np.clip(self.lam, 1e-5, 400.0, out=self.lam)

    def refresh_proposals(self):
        for d, (blocks, slot_off, packed_off) in self._by_dim.items():
            counts = self.w_count[blocks]
            mask = counts >= 2 * d + 5
            if not np.any(mask):
                continue
            sel_packed = packed_off[mask]
            gather = sel_packed[:, None] + np.arange(d * d)
            m2 = self.w_m2[gather].reshape(-1, d, d)
            cov = m2 / (counts[mask] - 1)[:, None, None]
            ridge = 1e-6 * np.trace(cov, axis1=1, axis2=2) / d + 1e-12
            cov += ridge[:, None, None] * np.eye(d)
            try:
                chols = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                continue
            flat = chols.reshape(len(sel_packed), d * d)
            for row, off in enumerate(sel_packed):
                self.prop_chol[off:off + d * d] = flat[row]

    def stats(self):
        return {"proposals": self.n_prop, "accepts": self.n_acc,
                "rate": self.n_acc / max(1, self.n_prop)}

    def get_state(self):
        return {
            "lam": self.lam.copy(), "prop_chol": self.prop_chol.copy(),
            "w_count": self.w_count.copy(), "w_mean": self.w_mean.copy(),
            "w_m2": self.w_m2.copy(), "n_prop": self.n_prop, "n_acc": self.n_acc,
        }

    def set_state(self, state):
        self.lam = state["lam"].copy()
        self.prop_chol = state["prop_chol"].copy()
        self.w_count = state["w_count"].copy()
        self.w_mean = state["w_mean"].copy()
        self.w_m2 = state["w_m2"].copy()
        self.n_prop = state["n_prop"]
        self.n_acc = state["n_acc"]


# ---------------------------------------------------------------------------
# sampler plan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UnitSpec:
    name: str
    kind: str
    params: tuple
    settings: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SamplerPlan:
    """Ordered update units; every free parameter appears in exactly one."""

    units: tuple

    def describe(self):
        return [
            {"name": u.name, "kind": u.kind, "params": list(u.params), **u.settings}
            for u in self.units
        ]

    def validate(self, ws):
        covered = []
        families = {t.name: t for t in ws.build_families()}
        for u in self.units:
            if u.kind == "sweep":
                t = families[u.params[0]]
                covered.extend(ws.param_names[len(ws.head_names) + p] for p in t.b_params)
            else:
                covered.extend(u.params)
        missing = set(ws.param_names) - set(covered)
        if missing:
            raise ValueError(f"sampler plan misses parameters: {sorted(missing)[:5]} ...")
        if len(covered) != len(set(covered)):
            seen, dups = set(), set()
            for name in covered:
                if name in seen:
                    dups.add(name)
                seen.add(name)
            raise ValueError(f"sampler plan repeats parameters: {sorted(dups)[:5]} ...")
        if len(covered) != len(ws.param_names):
            raise ValueError("sampler plan does not partition the parameters")


def default_plan(ws, cross_pairing=True):
    """The standard unit assignment for the model's active components.

    The full model pairs (sigma_beta_33, ell_v) under the factor slice
    sampler and (sigma_v, ell_beta_3) under a joint random walk; submodels
    lacking one side of a cross pairing fall back to the natural
    (sigma, ell) pairs. ``cross_pairing=False`` forces natural pairs in the
    full model too.
    """
    spec = ws.spec
    units = [
        UnitSpec("global:mu0", "scalar_rw", ("mu0",), {"scale": 1.0}),
        UnitSpec("global:mu1", "scalar_rw", ("mu1",), {"scale": 0.1}),
        UnitSpec("global:mu_phi", "scalar_rw", ("mu_phi",), {"scale": 0.1}),
    ]

    def pair(a, b, sa, sb):
        units.append(UnitSpec(f"pair:{a}+{b}", "block_rw", (a, b), {"scales": (sa, sb)}))

    pair("sigma_alpha_11", "ell_alpha_1", 1.0, 0.5)
    pair("sigma_alpha_22", "ell_alpha_2", 0.1, 0.5)
    if spec.population_logsd:
        pair("sigma_alpha_33", "ell_alpha_3", 0.1, 0.5)
    corr_a = tuple(
        f"R_alpha_{p+1}{q+1}" for p in range(spec.p_alpha) for q in range(p + 1, spec.p_alpha)
    )
    units.append(UnitSpec("corr:R_alpha", "block_rw", corr_a, {"scales": (0.1,) * len(corr_a)}))

    pair("sigma_beta_11", "ell_beta_1", 1.0, 0.5)
    pair("sigma_beta_22", "ell_beta_2", 0.1, 0.5)
    if spec.visit_effects and spec.subject_logsd and cross_pairing:
        units.append(
            UnitSpec(
                "afss:sigma_beta_33+ell_v", "afss", ("sigma_beta_33", "ell_v"),
                {"widths": (0.2, 2.0)},
            )
        )
        pair("sigma_v", "ell_beta_3", 0.1, 0.5)
    else:
        if spec.subject_logsd:
            pair("sigma_beta_33", "ell_beta_3", 0.1, 0.5)
        if spec.visit_effects:
            pair("sigma_v", "ell_v", 0.1, 0.5)
    corr_b = tuple(
        f"R_beta_{p+1}{q+1}" for p in range(spec.p_beta) for q in range(p + 1, spec.p_beta)
    )
    units.append(UnitSpec("corr:R_beta", "block_rw", corr_b, {"scales": (0.1,) * len(corr_b)}))

    units.append(UnitSpec("sweep:population", "sweep", ("population",), {"block": spec.p_alpha}))
    units.append(UnitSpec("sweep:subject", "sweep", ("subject",), {"block": 3}))
    if spec.subject_logsd:
        units.append(UnitSpec("sweep:subject_sd", "sweep", ("subject_sd",), {"block": 6}))
    if spec.visit_effects:
        units.append(UnitSpec("sweep:visit", "sweep", ("visit",), {"block": 3}))
    plan = SamplerPlan(units=tuple(units))
    plan.validate(ws)
    return plan


def _make_units(ws, plan, config):
    families = {t.name: t for t in ws.build_families()}
    out = []
    for u in plan.units:
        if u.kind == "scalar_rw":
            out.append(GlobalScalarUnit(u.params[0], u.settings.get("scale", 0.5)))
        elif u.kind == "block_rw":
            out.append(HyperBlockUnit(u.params, u.settings.get("scales")))
        elif u.kind == "afss":
            out.append(
                HyperSliceUnit(
                    u.params, u.settings.get("widths"),
                    config.afss_factor_refresh, config.afss_max_stepout,
                )
            )
        elif u.kind == "sweep":
            out.append(SweepUnit(families[u.params[0]]))
        else:
            raise ValueError(f"unknown unit kind {u.kind!r}")
    return out


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

MIN_RESID_SD = 0.05  # microns; floor for warm-started log residual SDs


def blank_state(data, spec):
    k = data.grid.n_superpixels
    return model.ParameterState(
        mu0=spec.priors.mu0_mean, mu1=spec.priors.mu1_mean, mu_phi=spec.priors.mu_phi_mean,
        sd_alpha=np.ones(spec.p_alpha), ell_alpha=np.full(spec.p_alpha, 2.0),
        R_alpha=np.eye(spec.p_alpha),
        sd_beta=np.ones(spec.p_beta), ell_beta=np.full(spec.p_beta, 2.0),
        R_beta=np.eye(spec.p_beta),
        alpha=np.zeros(spec.p_alpha * k), beta=np.zeros((data.n_subjects, spec.p_beta * k)),
        sd_v=1.0 if spec.visit_effects else None,
        ell_v=2.0 if spec.visit_effects else None,
        gamma=np.zeros(data.n_obs) if spec.visit_effects else None,
    )


def sample_correlation_matrix(rng, p, df=None):
    """Correlation matrix with marginally Uniform(-1,1) entries.

    Decomposes an inverse-Wishart draw (identity scale, ``df = p + 1``) into
    SDs and correlations; the Wishart draw uses the Bartlett construction.
    """
    if df is None:
        df = p + 1
    a = np.zeros((p, p))
    for i in range(p):
        a[i, i] = math.sqrt(rng.chisquare(df - i))
        for j in range(i):
            a[i, j] = rng.standard_normal()
    w = a @ a.T
    sigma = np.linalg.inv(w)
    s = np.sqrt(np.diag(sigma))
    return sigma / np.outer(s, s)


def sample_hyper_from_prior(spec, rng):
    """Draw all hyperparameters and globals from their priors."""
    pc = spec.priors

    def draw_side(p_n):
        scales = [pc.sd_intercept_scale, pc.sd_other_scale, pc.sd_other_scale]
        sd = np.array([abs(rng.normal(0.0, scales[p])) for p in range(p_n)])
        ell = pc.ell_scale / rng.gamma(pc.ell_shape, 1.0, size=p_n)
        return sd, ell, sample_correlation_matrix(rng, p_n)

    out = {}
    out["mu0"] = rng.normal(pc.mu0_mean, pc.mu0_sd)
    out["mu1"] = rng.normal(pc.mu1_mean, pc.mu1_sd)
    out["mu_phi"] = rng.normal(pc.mu_phi_mean, pc.mu_phi_sd)
    out["sd_alpha"], out["ell_alpha"], out["R_alpha"] = draw_side(spec.p_alpha)
    out["sd_beta"], out["ell_beta"], out["R_beta"] = draw_side(spec.p_beta)
    if spec.visit_effects:
        out["sd_v"] = abs(rng.normal(0.0, pc.sd_other_scale))
        out["ell_v"] = pc.ell_scale / rng.gamma(pc.ell_shape, 1.0)
    return out


def _pooled_ols(t, y):
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        return 0.0, 0.0, MIN_RESID_SD
    if len(y) < 3 or np.ptp(t) == 0:
        return float(np.mean(y)), 0.0, MIN_RESID_SD
    sxx = float(np.sum((t - t.mean()) ** 2))
    slope = float(np.sum((t - t.mean()) * (y - y.mean())) / sxx)
    intercept = float(y.mean() - slope * t.mean())
    resid = y - intercept - slope * t
    sd = math.sqrt(float(resid @ resid) / max(1, len(y) - 2))
    return intercept, slope, max(sd, MIN_RESID_SD)


def initialize_state(data, spec, rng, strategy="slr-warm", max_retries=50):
    """Construct a starting state with finite log posterior.

    ``"prior"`` draws hyperparameters and globals from their priors (with
    retries) and sets all effects at their prior means. ``"slr-warm"`` seeds
    the population fields from pooled per-superpixel least squares and the
    subject effects from per-profile least squares, with log residual SDs
    floored at ``log(0.05)`` microns so exact fits cannot produce a
    degenerate likelihood.
    """
    if strategy == "prior":
        ws = ModelWorkspace(data, spec)
        for _ in range(max_retries):
            hyper = sample_hyper_from_prior(spec, rng)
            state = blank_state(data, spec)
            for key, value in hyper.items():
                setattr(state, key, value)
            mu = np.array([state.mu0, state.mu1, state.mu_phi])[: spec.p_alpha]
            state.alpha = np.tile(mu, data.grid.n_superpixels)
            try:
                ws.load_state(state)
            except (np.linalg.LinAlgError, ValueError):
                continue
            if math.isfinite(ws.cached_log_posterior()):
                return state
        raise InitializationError(
            f"no valid prior-drawn starting state after {max_retries} attempts"
        )

    if strategy != "slr-warm":
        raise ValueError(f"unknown initialization strategy {strategy!r}")

    k_n = data.grid.n_superpixels
    state = blank_state(data, spec)
    alpha0 = np.zeros(k_n)
    alpha1 = np.zeros(k_n)
    phi = np.full(k_n, math.log(MIN_RESID_SD))
    for k in range(k_n):
        mask = data.k == k
        a0, a1, sd = _pooled_ols(data.t[mask], data.y[mask])
        alpha0[k], alpha1[k] = a0, a1
        phi[k] = math.log(sd)
    if data.n_obs == 0:
        alpha0[:] = spec.priors.mu0_mean
        alpha1[:] = spec.priors.mu1_mean
        phi[:] = spec.priors.mu_phi_mean
    state.mu0 = float(np.mean(alpha0))
    state.mu1 = float(np.mean(alpha1))
    state.mu_phi = float(np.mean(phi))
    pa = spec.p_alpha
    state.alpha[0::pa] = alpha0
    state.alpha[1::pa] = alpha1
    if spec.population_logsd:
        state.alpha[2::pa] = phi

    pb = spec.p_beta
    for i in range(data.n_subjects):
        for k in range(k_n):
            mask = (data.subj == i) & (data.k == k)
            cnt = int(np.count_nonzero(mask))
            if cnt < 3:
                continue
            b0, b1, sd = _pooled_ols(data.t[mask], data.y[mask])
            state.beta[i, k * pb] = b0 - alpha0[k]
            state.beta[i, k * pb + 1] = b1 - alpha1[k]
            if spec.subject_logsd:
                state.beta[i, k * pb + 2] = math.log(sd) - (
                    phi[k] if spec.population_logsd else state.mu_phi
                )

    def spread(values, lo, hi):
        return float(np.clip(np.std(values) if len(values) > 1 else lo, lo, hi))

    state.sd_alpha[0] = spread(alpha0, 0.5, 30.0)
    state.sd_alpha[1] = spread(alpha1, 0.05, 5.0)
    if spec.population_logsd:
        state.sd_alpha[2] = spread(phi, 0.05, 2.0)
    state.sd_beta[0] = spread(state.beta[:, 0::pb].ravel(), 0.5, 30.0)
    state.sd_beta[1] = spread(state.beta[:, 1::pb].ravel(), 0.05, 5.0)
    if spec.subject_logsd:
        state.sd_beta[2] = spread(state.beta[:, 2::pb].ravel(), 0.05, 2.0)

    ws = ModelWorkspace(data, spec)
    ws.load_state(state)
    if not math.isfinite(ws.cached_log_posterior()):
        raise InitializationError("warm start produced a non-finite log posterior")
    return state


# ---------------------------------------------------------------------------
# chain driver
# ---------------------------------------------------------------------------


@dataclass
class ChainCheckpoint:
    iteration: int
    state: object
    rng_state: dict
    unit_states: list


@dataclass
class ChainResult:
    names: list
    groups: dict
    draws: np.ndarray
    iterations: np.ndarray
    loglik: np.ndarray
    acceptance: dict
    checkpoint: ChainCheckpoint
    runtime_s: float


def run_chain(
    data, spec, config, seed, plan=None, stop_at=None, resume=None, debug=False,
    debug_every=500,
):
    """Run one MCMC chain; deterministic given (data, spec, config, seed).

    ``stop_at`` ends the chain early at that iteration and returns a
    checkpoint from which ``resume`` continues bit-exactly. Draws are
    recorded after ``config.burn_in`` at stride ``config.thin``; the
    pointwise log-likelihood row is stored with each retained draw when
    ``config.record_loglik``.
    """
    start_time = time.perf_counter()
    ws = ModelWorkspace(data, spec)
    if plan is None:
        plan = default_plan(ws)
    else:
        plan.validate(ws)
    units = _make_units(ws, plan, config)
    rng = np.random.default_rng(seed)

    if resume is not None:
        start_iter = resume.iteration
        ws.load_state(resume.state)
        rng.bit_generator.state = resume.rng_state
        for unit, ustate in zip(units, resume.unit_states):
            unit.set_state(ustate)
    else:
        start_iter = 0
        state = initialize_state(data, spec, rng, strategy=config.init)
        ws.load_state(state)
        lp = ws.cached_log_posterior()
        if not math.isfinite(lp):
            raise InitializationError("non-finite log posterior at initialization")

    last_iter = config.n_iterations if stop_at is None else min(stop_at, config.n_iterations)
    kept_iters = [
        it for it in range(config.burn_in + config.thin, config.n_iterations + 1, config.thin)
        if start_iter < it <= last_iter
    ]
    n_all = len(ws.param_names)
    draws = np.empty((len(kept_iters), n_all))
    loglik = np.empty((len(kept_iters), ws.N)) if config.record_loglik else None
    keep_pos = {it: s for s, it in enumerate(kept_iters)}

    for it in range(start_iter + 1, last_iter + 1):
        adapting = it <= config.burn_in
        eta = _adapt_rate(it) if adapting else 0.0
        for unit in units:
            unit.step(ws, rng, eta)
        if adapting and it % config.adapt_interval == 0:
            for unit in units:
                unit.refresh_proposals()
        if config.cache_refresh and it % config.cache_refresh == 0:
            ws.refresh_lik_caches()
            ws.refresh_prior_caches()
        if debug and it % debug_every == 0:
            ws.check_consistency()
        pos = keep_pos.get(it)
        if pos is not None:
            ws.record_vector(out=draws[pos])
            if loglik is not None:
                ws.pointwise_loglik_cached(out=loglik[pos])

    checkpoint = ChainCheckpoint(
        iteration=last_iter,
        state=ws.extract_state(),
        rng_state=rng.bit_generator.state,
        unit_states=[u.get_state() for u in units],
    )
    return ChainResult(
        names=ws.param_names,
        groups=ws.param_groups,
        draws=draws,
        iterations=np.array(kept_iters, dtype=np.int64),
        loglik=loglik,
        acceptance={u.name: u.stats() for u in units},
        checkpoint=checkpoint,
        runtime_s=time.perf_counter() - start_time,
    )


def _chain_seed(root_seed, n_chains, chain_index):
    return np.random.SeedSequence(root_seed).spawn(n_chains)[chain_index]


def _chain_worker(args):
    data, spec, config, chain_index, plan, debug = args
    seed = _chain_seed(config.seed, config.n_chains, chain_index)
    return run_chain(data, spec, config, seed, plan=plan, debug=debug)


def fit(data, spec, config, plan=None, n_workers=1, debug=False):
    """Fit a model with multiple chains; returns a :class:`PosteriorDraws`.

    Chains are seeded by spawning the root seed, so results do not depend on
    ``n_workers``; workers are separate processes with BLAS threading capped.
    """
    jobs = [(data, spec, config, c, plan, debug) for c in range(config.n_chains)]
    start = time.perf_counter()
    if n_workers <= 1 or config.n_chains == 1:
        results = [_chain_worker(job) for job in jobs]
    else:
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(
            max_workers=min(n_workers, config.n_chains),
            mp_context=ctx,
            initializer=limit_blas_threads,
        ) as pool:
            results = list(pool.map(_chain_worker, jobs))
    chains = np.stack([r.draws for r in results])
    loglik = None
    if config.record_loglik:
        loglik = np.stack([r.loglik for r in results])
    meta = {
        "model": spec.name,
        "seed": config.seed,
        "n_chains": config.n_chains,
        "n_iterations": config.n_iterations,
        "burn_in": config.burn_in,
        "thin": config.thin,
        "engine": core.backend_name(),
        "plan": (plan.describe() if plan is not None else "default"),
        "acceptance": [r.acceptance for r in results],
        "chain_runtime_s": [round(r.runtime_s, 3) for r in results],
        "total_runtime_s": round(time.perf_counter() - start, 3),
    }
    return PosteriorDraws(
        names=results[0].names,
        groups=results[0].groups,
        chains=chains,
        iterations=results[0].iterations,
        loglik=loglik,
        meta=meta,
    )
