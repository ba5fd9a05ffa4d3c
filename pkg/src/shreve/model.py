"""The SHREVE model family: specs, parameter containers, and log-densities.

The observation model for thickness ``y_ijk`` of subject i at visit j,
superpixel k, time ``t_ij`` is

    y_ijk = alpha_0k + alpha_1k t_ij + beta_0ik + beta_1ik t_ij
            + gamma_ijk + eps_ijk,        eps_ijk ~ N(0, tau_ik^2),
    log tau_ik = phi_k + sigma_ik,

with population fields (alpha_0, alpha_1, phi) drawn from a multivariate
Gaussian process over the grid, subject effects (beta_0i, beta_1i, sigma_i)
from a second, zero-mean multivariate GP shared across subjects, and visit
effects gamma_ij from a univariate GP per scan. Three switches produce the
nested submodels: dropping the population log-SD process pins phi_k at the
global level mu_phi, dropping the subject log-SD process pins sigma_ik at 0,
and dropping visit effects removes gamma entirely. The full model is SHREVE;
without visit effects it is SHRE; "-(a)"/"-(b)" mark the dropped log-SD
processes.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import t as student_t

from . import kernels
from .grid import pairwise_distances

__all__ = [
    "PriorConfig",
    "ModelSpec",
    "ParameterState",
    "MODEL_LADDER",
    "normal_logpdf",
    "half_normal_logpdf",
    "inverse_gamma_logpdf",
    "correlation_prior_logdensity",
    "log_likelihood",
    "pointwise_log_likelihood",
    "log_prior",
    "log_posterior",
    "log_posterior_delta",
    "slr_fit",
    "slr_posterior_draws",
    "SLRFit",
    "save_state",
    "load_state",
]

LOG_2PI = math.log(2.0 * math.pi)

# Names of the eight hierarchical models, most to least complex.
MODEL_LADDER = (
    "SHREVE",
    "SHREVE-(a)",
    "SHREVE-(b)",
    "SHREVE-(ab)",
    "SHRE",
    "SHRE-(a)",
    "SHRE-(b)",
    "SHRE-(ab)",
)


@dataclass(frozen=True)
class PriorConfig:
    """Hyperconstants of the weakly informative priors.

    Lengthscales get inverse-gamma priors calibrated to the grid (mean 2, SD
    4 in grid units: neighbors are 1 unit apart, opposite corners ~7).
    Process SDs get half-normal priors, wider for intercepts than for slopes
    and log residual SDs. Globals get normals on the natural (micron) scale.
    """

    ell_shape: float = 2.25
    ell_scale: float = 2.5
    sd_intercept_scale: float = 10.0
    sd_other_scale: float = 2.5
    mu0_mean: float = 73.0
    mu0_sd: float = 15.0
    mu1_mean: float = -0.3
    mu1_sd: float = 0.3
    mu_phi_mean: float = 0.7
    mu_phi_sd: float = 0.3


@dataclass(frozen=True)
class ModelSpec:
    """Which model components are active, plus prior and kernel constants.

    ``population_logsd`` is component (a): the spatial process phi_k on the
    population log residual SD. ``subject_logsd`` is component (b): the
    subject-level offsets sigma_ik. ``visit_effects`` is component (c).
    """

    visit_effects: bool = True
    population_logsd: bool = True
    subject_logsd: bool = True
    nu: float = 0.5
    sigma_form: str = "sum"
    priors: PriorConfig = field(default_factory=PriorConfig)

    @property
    def p_alpha(self):
        return 3 if self.population_logsd else 2

    @property
    def p_beta(self):
        return 3 if self.subject_logsd else 2

    @property
    def name(self):
        base = "SHREVE" if self.visit_effects else "SHRE"
        omitted = ""
        if not self.population_logsd:
            omitted += "a"
        if not self.subject_logsd:
            omitted += "b"
        return f"{base}-({omitted})" if omitted else base

    @classmethod
    def from_name(cls, name, **kwargs):
        """Build a spec from a ladder name like ``"SHREVE-(ab)"`` or ``"SHRE"``."""
        name = name.strip()
        if name.upper().startswith("SHREVE"):
            base, rest = True, name[6:]
        elif name.upper().startswith("SHRE"):
            base, rest = False, name[4:]
        else:
            raise ValueError(f"unknown model name {name!r}")
        rest = rest.strip("-() ").lower()
        if not set(rest) <= {"a", "b"}:
            raise ValueError(f"unknown model name {name!r}")
        return cls(
            visit_effects=base,
            population_logsd="a" not in rest,
            subject_logsd="b" not in rest,
            **kwargs,
        )


@dataclass
class ParameterState:
    """One complete parameter configuration of a SHREVE-family model.

    Array layouts are location-major: ``alpha[k * P + p]`` with processes
    p = 0 (intercept), 1 (slope), 2 (log residual SD, when present);
    ``beta[i, k * P + p]`` likewise. ``gamma`` is aligned with the dataset's
    observation order (one visit effect per observed record) and is None
    when visit effects are disabled.
    """

    mu0: float
    mu1: float
    mu_phi: float
    sd_alpha: np.ndarray
    ell_alpha: np.ndarray
    R_alpha: np.ndarray
    sd_beta: np.ndarray
    ell_beta: np.ndarray
    R_beta: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    sd_v: float = None
    ell_v: float = None
    gamma: np.ndarray = None

    def copy(self):
        return ParameterState(
            mu0=self.mu0, mu1=self.mu1, mu_phi=self.mu_phi,
            sd_alpha=self.sd_alpha.copy(), ell_alpha=self.ell_alpha.copy(),
            R_alpha=self.R_alpha.copy(),
            sd_beta=self.sd_beta.copy(), ell_beta=self.ell_beta.copy(),
            R_beta=self.R_beta.copy(),
            alpha=self.alpha.copy(), beta=self.beta.copy(),
            sd_v=self.sd_v, ell_v=self.ell_v,
            gamma=None if self.gamma is None else self.gamma.copy(),
        )


# ---------------------------------------------------------------------------
# scalar prior densities
# ---------------------------------------------------------------------------

def normal_logpdf(x, mean, sd):
    z = (x - mean) / sd
    return -math.log(sd) - 0.5 * LOG_2PI - 0.5 * z * z


def half_normal_logpdf(x, scale):
    """Log density of N(0, scale^2) restricted to x > 0; -inf otherwise."""
    if x <= 0:
        return -math.inf
    return 0.5 * math.log(2.0 / math.pi) - math.log(scale) - 0.5 * (x / scale) ** 2


def inverse_gamma_logpdf(x, shape, scale):
    """Log density of the inverse gamma with the given shape and scale.

    Mean ``scale / (shape - 1)`` (shape > 1), variance
    ``scale^2 / ((shape-1)^2 (shape-2))`` (shape > 2); the default prior
    IG(2.25, 2.5) has mean 2 and SD 4.
    """
    if x <= 0:
        return -math.inf
    return shape * math.log(scale) - math.lgamma(shape) - (shape + 1.0) * math.log(x) - scale / x


def correlation_prior_logdensity(R, df=None):
    """Marginally uniform correlation-matrix prior from the inverse Wishart.

    Decomposing an inverse-Wishart covariance with identity scale and
    ``df = P + 1`` degrees of freedom into SDs and correlations induces a
    density on the correlation matrix under which every off-diagonal entry
    is marginally Uniform(-1, 1) (Barnard, McCulloch and Meng, 2000):

        log p(R) = ((df - 1) (P - 1) / 2 - 1) log|R|
                   - (df / 2) * sum_p log|R_[pp]|  + const,

    with ``R_[pp]`` the principal submatrix deleting row/column p. Returned
    unnormalized (only differences matter in Metropolis-Hastings); -inf when
    R is not positive definite.
    """
    R = np.asarray(R, dtype=float)
    p = R.shape[0]
    if R.shape != (p, p) or not np.allclose(R, R.T, atol=1e-10):
        raise ValueError("R must be a symmetric square matrix")
    if not np.allclose(np.diag(R), 1.0, atol=1e-10):
        raise ValueError("R must have unit diagonal")
    if df is None:
        df = p + 1
    try:
        chol = np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        return -math.inf
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    minor_logdets = 0.0
    for i in range(p):
        keep = [j for j in range(p) if j != i]
        sub = R[np.ix_(keep, keep)]
        sign, sublogdet = np.linalg.slogdet(sub)
        if sign <= 0:
            return -math.inf
        minor_logdets += sublogdet
    return ((df - 1.0) * (p - 1.0) / 2.0 - 1.0) * logdet - 0.5 * df * minor_logdets


# ---------------------------------------------------------------------------
# likelihood and prior over a dataset
# ---------------------------------------------------------------------------

def _mean_and_logsd(state, data, spec):
    """Model mean and log residual SD for every observation."""
    pa, pb = spec.p_alpha, spec.p_beta
    k = data.k
    mean = state.alpha[k * pa] + state.alpha[k * pa + 1] * data.t
    mean = mean + state.beta[data.subj, k * pb] + state.beta[data.subj, k * pb + 1] * data.t
    if spec.visit_effects:
        mean = mean + state.gamma
    if spec.population_logsd:
        logsd = state.alpha[k * pa + 2].copy()
    else:
        logsd = np.full(data.n_obs, state.mu_phi)
    if spec.subject_logsd:
        logsd = logsd + state.beta[data.subj, k * pb + 2]
    return mean, logsd


def pointwise_log_likelihood(state, data, spec):
    """Per-observation Gaussian log densities, in data record order."""
    mean, logsd = _mean_and_logsd(state, data, spec)
    z = (data.y - mean) * np.exp(-logsd)
    return -logsd - 0.5 * LOG_2PI - 0.5 * z * z


def log_likelihood(state, data, spec):
    """Total observation log likelihood; non-finite signals an invalid state."""
    return float(np.sum(pointwise_log_likelihood(state, data, spec)))


def _mvn_logpdf_chol(residual, chol):
    w = solve_triangular(chol, residual, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    if residual.ndim == 1:
        return -0.5 * (w @ w + logdet + residual.shape[0] * LOG_2PI)
    quads = np.sum(w * w, axis=0)
    return -0.5 * (quads + logdet + residual.shape[0] * LOG_2PI)


def _alpha_prior_mean(state, data, spec):
    mu = np.array([state.mu0, state.mu1, state.mu_phi])[: spec.p_alpha]
    return np.tile(mu, data.grid.n_superpixels)


def _hyper_support_ok(state, spec):
    if np.any(state.sd_alpha <= 0) or np.any(state.ell_alpha <= 0):
        return False
    if np.any(state.sd_beta <= 0) or np.any(state.ell_beta <= 0):
        return False
    if spec.visit_effects and (state.sd_v <= 0 or state.ell_v <= 0):
        return False
    return True


def log_prior(state, data, spec):
    """Log prior density of a full parameter state. -inf outside support."""
    pc = spec.priors
    if not _hyper_support_ok(state, spec):
        return -math.inf

    lp = normal_logpdf(state.mu0, pc.mu0_mean, pc.mu0_sd)
    lp += normal_logpdf(state.mu1, pc.mu1_mean, pc.mu1_sd)
    lp += normal_logpdf(state.mu_phi, pc.mu_phi_mean, pc.mu_phi_sd)

    for sd_vec, ell_vec, corr in (
        (state.sd_alpha, state.ell_alpha, state.R_alpha),
        (state.sd_beta, state.ell_beta, state.R_beta),
    ):
        scales = [pc.sd_intercept_scale, pc.sd_other_scale, pc.sd_other_scale]
        for p in range(len(sd_vec)):
            lp += half_normal_logpdf(sd_vec[p], scales[p])
            lp += inverse_gamma_logpdf(ell_vec[p], pc.ell_shape, pc.ell_scale)
        lp += correlation_prior_logdensity(corr)
        if not math.isfinite(lp):
            return -math.inf
    if spec.visit_effects:
        lp += half_normal_logpdf(state.sd_v, pc.sd_other_scale)
        lp += inverse_gamma_logpdf(state.ell_v, pc.ell_shape, pc.ell_scale)

    dist = pairwise_distances(data.grid)
    try:
        spec_a = kernels.MultiMaternSpec(
            sd=state.sd_alpha, nu=np.full(spec.p_alpha, spec.nu), ell=state.ell_alpha,
            corr=state.R_alpha, sigma_form=spec.sigma_form,
        )
        cov_a = kernels.add_jitter(kernels.assemble_cross_covariance(spec_a, dist))
        chol_a = np.linalg.cholesky(cov_a)
        spec_b = kernels.MultiMaternSpec(
            sd=state.sd_beta, nu=np.full(spec.p_beta, spec.nu), ell=state.ell_beta,
            corr=state.R_beta, sigma_form=spec.sigma_form,
        )
        cov_b = kernels.add_jitter(kernels.assemble_cross_covariance(spec_b, dist))
        chol_b = np.linalg.cholesky(cov_b)
    except (np.linalg.LinAlgError, ValueError):
        return -math.inf

    lp += _mvn_logpdf_chol(state.alpha - _alpha_prior_mean(state, data, spec), chol_a)
    lp += float(np.sum(_mvn_logpdf_chol(state.beta.T, chol_b)))

    if spec.visit_effects:
        cov_v = kernels.add_jitter(
            kernels.assemble_univariate_covariance(
                kernels.MaternParams(nu=spec.nu, ell=state.ell_v, sd=state.sd_v), dist
            )
        )
        start = 0
        n_obs = data.n_obs
        while start < n_obs:
            end = start
            i, j = data.subj[start], data.visit[start]
            while end < n_obs and data.subj[end] == i and data.visit[end] == j:
                end += 1
            ks = data.k[start:end]
            try:
                chol_v = np.linalg.cholesky(cov_v[np.ix_(ks, ks)])
            except np.linalg.LinAlgError:
                return -math.inf
            lp += _mvn_logpdf_chol(state.gamma[start:end], chol_v)
            start = end
    return float(lp)


def log_posterior(state, data, spec):
    lp = log_prior(state, data, spec)
    if not math.isfinite(lp):
        return -math.inf
    return lp + log_likelihood(state, data, spec)


def log_posterior_delta(state, proposed_block, data, spec):
    """Log-posterior difference for a named block proposal.

    ``proposed_block`` maps parameter names (latent effects like
    ``"beta0[s001,2.2]"``, hyperparameters like ``"ell_v"``, or globals) to
    proposed values. Only the affected terms are evaluated. Mixing latent
    with hyperparameter names in one block is not supported (no sampler
    unit does that).
    """
    from ._workspace import ModelWorkspace

    ws = ModelWorkspace(data, spec)
    ws.load_state(state)
    head = set(ws.head_names)
    names = list(proposed_block)
    if all(nm in head for nm in names):
        if any(nm in ("mu0", "mu1", "mu_phi") for nm in names):
            if len(names) != 1:
                raise ValueError("global parameters update one at a time")
            delta, _ = ws.global_delta(names[0], proposed_block[names[0]])
            return delta
        delta, _ = ws.hyper_delta(proposed_block)
        return delta
    if any(nm in head for nm in names):
        raise ValueError("cannot mix hyperparameters and latent effects in one block")
    theta_pos = {nm: i for i, nm in enumerate(ws.theta_names)}
    idx = np.array([theta_pos[nm] for nm in names], dtype=np.int64)
    deltas = np.array([proposed_block[nm] for nm in names]) - ws.theta[idx]
    return ws.posterior_delta(idx, deltas)


# ---------------------------------------------------------------------------
# per-profile simple linear regression (clinical baseline)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SLRFit:
    intercept: float
    slope: float
    resid_sd: float
    slope_interval: tuple
    slope_se: float
    df: int


def slr_fit(y, t, level=0.95):
    """Ordinary least squares of y on t with a flat-prior slope interval.

    The central interval comes from the flat-prior posterior of the slope,
    a Student-t with ``len(y) - 2`` degrees of freedom, matching classical
    least squares.
    """
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    n = len(y)
    if n < 3:
        raise ValueError("simple linear regression needs at least 3 observations")
    sxx = float(np.sum((t - t.mean()) ** 2))
    if sxx <= 0:
        raise ValueError("degenerate design: time values are constant")
    slope = float(np.sum((t - t.mean()) * (y - y.mean())) / sxx)
    intercept = float(y.mean() - slope * t.mean())
    resid = y - intercept - slope * t
    df = n - 2
    sse = float(resid @ resid)
    resid_sd = math.sqrt(sse / df)
    slope_se = resid_sd / math.sqrt(sxx)
    tq = float(student_t.ppf(0.5 + level / 2.0, df))
    return SLRFit(
        intercept=intercept,
        slope=slope,
        resid_sd=resid_sd,
        slope_interval=(slope - tq * slope_se, slope + tq * slope_se),
        slope_se=slope_se,
        df=df,
    )


def slr_posterior_draws(y, t, size, rng):
    """Draws from the flat-prior posterior of (intercept, slope, resid SD).

    sigma^2 is scaled inverse chi-squared with n-2 degrees of freedom;
    (intercept, slope) given sigma are bivariate normal around the OLS
    estimates with covariance ``sigma^2 (X'X)^{-1}``.
    """
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    fit = slr_fit(y, t)
    n = len(y)
    x = np.column_stack([np.ones(n), t])
    xtx_inv = np.linalg.inv(x.T @ x)
    chol = np.linalg.cholesky(xtx_inv + 1e-15 * np.eye(2))
    sse = fit.resid_sd**2 * fit.df
    sigma2 = sse / rng.chisquare(fit.df, size=size) if sse > 0 else np.zeros(size)
    z = rng.standard_normal((size, 2))
    coef = np.array([fit.intercept, fit.slope]) + np.sqrt(sigma2)[:, None] * (z @ chol.T)
    return coef[:, 0], coef[:, 1], np.sqrt(sigma2)


# ---------------------------------------------------------------------------
# state snapshots
# ---------------------------------------------------------------------------

STATE_FORMAT_VERSION = 1


def save_state(state, names, vector, path, model_name):
    """Write a named flat snapshot of a parameter state (versioned CSV)."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# shreve-state-version: {STATE_FORMAT_VERSION}\n")
        fh.write(f"# model: {model_name}\n")
        writer = csv.writer(fh)
        writer.writerow(["parameter", "value"])
        for name, value in zip(names, vector):
            writer.writerow([name, repr(float(value))])


def load_state(path):
    """Read a snapshot written by :func:`save_state`; returns (names, values, meta)."""
    names, values, meta = [], [], {}
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                meta[key.strip()] = val.strip()
                continue
            reader = csv.reader([line] + list(fh))
            header = next(reader)
            if header != ["parameter", "value"]:
                raise ValueError(f"{path}: unexpected snapshot header {header}")
            for row in reader:
                names.append(row[0])
                values.append(float(row[1]))
            break
    version = int(meta.get("shreve-state-version", -1))
    if version != STATE_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported state version {version}")
    return names, np.array(values), meta
