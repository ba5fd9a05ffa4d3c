"""Model comparison and prediction.

WAIC and PSIS-LOO are computed from the pointwise log-likelihood matrix the
sampler persists (no model re-evaluation at comparison time); the holdout
design removes ~20% of each subject's last-visit observations (capped at 7)
and scores mean squared prediction error over posterior draws, predicting
the held-out visit effect from the same visit's sampled effects through the
GP conditional. Per-profile simple linear regression, the clinical baseline,
gets exact flat-prior posterior draws and enters the same comparison table.
"""
import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from . import kernels, model
from .grid import pairwise_distances

__all__ = [
    "waic",
    "psis_loo",
    "WAICResult",
    "LOOResult",
    "HoldoutPlan",
    "make_holdout",
    "predict_heldout",
    "predict_slr",
    "mspe",
    "classify_slopes",
    "slr_pointwise_loglik",
    "ComparisonTable",
    "PARETO_K_FLAG",
]

PARETO_K_FLAG = 0.7


# ---------------------------------------------------------------------------
# information criteria
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WAICResult:
    waic: float
    lppd: float
    p_waic: float

    def __float__(self):
        return self.waic


def waic(loglik):
    """Widely applicable information criterion from pointwise log likelihoods.

    ``-2 [ sum_n log mean_s exp(ll_ns) - sum_n var_s(ll_ns) ]`` with the
    log-mean computed by log-sum-exp and the penalty the sample variance
    over draws. Lower is better.
    """
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim != 2 or ll.shape[0] < 2:
        raise ValueError("log-likelihood matrix must be (S >= 2 draws, N observations)")
    if not np.all(np.isfinite(ll)):
        raise ValueError("log-likelihood matrix contains non-finite entries")
    s = ll.shape[0]
    lppd = float(np.sum(logsumexp(ll, axis=0) - math.log(s)))
    p_waic = float(np.sum(np.var(ll, axis=0, ddof=1)))
    return WAICResult(waic=-2.0 * (lppd - p_waic), lppd=lppd, p_waic=p_waic)


def _gpd_fit(exceedances):
    """Generalized-Pareto (k, sigma) fit by the Zhang-Stephens profile method.

    Expects sorted positive exceedances; returns the weakly regularized
    shape estimate used throughout the PSIS literature.
    """
    x = np.asarray(exceedances, dtype=float)
    n = len(x)
    prior_bs, prior_k = 3.0, 10.0
    m_est = 30 + int(math.sqrt(n))
    b = 1.0 - np.sqrt(m_est / (np.arange(1.0, m_est + 1) - 0.5))
    b /= prior_bs * x[int(n / 4 + 0.5) - 1]
    b += 1.0 / x[-1]
    k = np.log1p(-b[:, None] * x).mean(axis=1)
    log_lik = n * (np.log(-(b / k)) - k - 1.0)
    weights = 1.0 / np.exp(log_lik - log_lik[:, None]).sum(axis=1)
    real = weights >= 10.0 * np.finfo(float).eps
    if not np.all(real):
        weights = weights[real]
        b = b[real]
    weights /= weights.sum()
    b_post = float(np.sum(b * weights))
    k_post = float(np.log1p(-b_post * x).mean())
    sigma = -k_post / b_post
    k_post = (n * k_post + prior_k * 0.5) / (n + prior_k)
    return k_post, sigma


def _gpd_quantile(probs, k, sigma):
    if abs(k) < np.finfo(float).eps:
        return sigma * (-np.log1p(-probs))
    return sigma * np.expm1(-k * np.log1p(-probs)) / k


def _smooth_log_weights(lw, tail_len):
    """Pareto-smooth the largest ``tail_len`` log weights of one observation.

    Returns (smoothed log weights, pareto k, note). Weights are normalized
    only up to the shared max; the caller renormalizes.
    """
    lw = lw - lw.max()
    order = np.argsort(lw)
    tail_idx = order[-tail_len:]
    cutoff = lw[order[-tail_len - 1]]
    cutoff = max(cutoff, math.log(np.finfo(float).tiny))
    tail = lw[tail_idx]
    if np.ptp(tail) < 1e-12:
        return lw, math.nan, "degenerate tail; smoothing skipped"
    exp_cutoff = math.exp(cutoff)
    exceed = np.exp(tail) - exp_cutoff
    sort_in_tail = np.argsort(exceed)
    k, sigma = _gpd_fit(exceed[sort_in_tail])
    if not math.isfinite(k):
        return lw, math.nan, "Pareto fit failed; smoothing skipped"
    probs = (np.arange(tail_len) + 0.5) / tail_len
    smoothed = np.log(_gpd_quantile(probs, k, sigma) + exp_cutoff)
    out = lw.copy()
    out[tail_idx[sort_in_tail]] = smoothed
    np.minimum(out, 0.0, out=out)
    return out, k, ""


@dataclass
class LOOResult:
    loo: float
    pointwise: np.ndarray
    pareto_k: np.ndarray
    notes: list = field(default_factory=list)

    def __float__(self):
        return self.loo

    @property
    def n_flagged(self):
        return int(np.sum(self.pareto_k[np.isfinite(self.pareto_k)] > PARETO_K_FLAG))

    @property
    def max_k(self):
        finite = self.pareto_k[np.isfinite(self.pareto_k)]
        return float(finite.max()) if len(finite) else math.nan


def psis_loo(loglik):
    """Approximate leave-one-out cross-validation by Pareto-smoothed weights.

    Raw importance ratios are the reciprocal pointwise likelihoods; per
    observation the largest ``min(0.2 S, 3 sqrt(S))`` weights are replaced
    by generalized-Pareto quantiles fitted to that tail. Reports
    ``-2 sum_n log (sum_s w_ns p_ns / sum_s w_ns)`` plus the per-observation
    Pareto shape, flagging ``k > 0.7``.
    """
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim != 2 or ll.shape[0] < 2:
        raise ValueError("log-likelihood matrix must be (S >= 2 draws, N observations)")
    if not np.all(np.isfinite(ll)):
        raise ValueError("log-likelihood matrix contains non-finite entries")
    s, n = ll.shape
    if s < 100:
        warnings.warn(
            f"PSIS-LOO with only {s} draws; at least 100 are recommended", RuntimeWarning
        )
    tail_len = int(min(0.2 * s, 3.0 * math.sqrt(s)))
    pointwise = np.empty(n)
    pareto_k = np.empty(n)
    notes = []
    for i in range(n):
        lw = -ll[:, i]
        if tail_len >= 5:
            lw, k, note = _smooth_log_weights(lw, tail_len)
            if note:
                notes.append(f"observation {i}: {note}")
        else:
            k = math.nan
            notes.append(f"observation {i}: tail too short for smoothing (S={s})")
        pareto_k[i] = k
        pointwise[i] = logsumexp(lw + ll[:, i]) - logsumexp(lw)
    return LOOResult(loo=-2.0 * float(np.sum(pointwise)), pointwise=pointwise,
                     pareto_k=pareto_k, notes=notes)


# ---------------------------------------------------------------------------
# holdout design and prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HoldoutPlan:
    """Per-subject last-visit superpixels held out for prediction scoring.

    ``points`` lists (subject index, visit index, superpixel index) in data
    record order; ``seed`` reproduces the plan from the same data.
    """

    points: tuple
    seed: int

    @property
    def n_points(self):
        return len(self.points)


def make_holdout(data, seed, fraction=0.2, cap=7):
    """Sample held-out superpixels at every subject's last visit.

    Each subject contributes ``min(cap, round(fraction * available))``
    superpixels, drawn uniformly without replacement from the observations
    present at the last visit (approximately 20% of a full grid's 36, i.e.
    7, with fewer for visits thinned by cleaning). Subjects whose last visit
    has no observations are skipped with a warning.

    Returns ``(plan, training_data)`` where the training dataset has the
    held-out observations removed.
    """
    rng = np.random.default_rng(seed)
    keep = np.ones(data.n_obs, dtype=bool)
    points = []
    for i in range(data.n_subjects):
        last = data.n_visits(i) - 1
        mask = (data.subj == i) & (data.visit == last)
        idx = np.flatnonzero(mask)
        if len(idx) == 0:
            warnings.warn(
                f"subject {data.subject_ids[i]}: no observations at the last visit; skipped",
                RuntimeWarning,
            )
            continue
        n_hold = min(cap, int(math.floor(fraction * len(idx) + 0.5)))
        if n_hold == 0:
            continue
        chosen = rng.choice(idx, size=n_hold, replace=False)
        for o in sorted(chosen):
            points.append((i, last, int(data.k[o])))
            keep[o] = False
    return HoldoutPlan(points=tuple(points), seed=seed), data.subset(keep)


def _gamma_conditional_draw(cov, obs_ks, held_ks, gamma_obs, rng):
    """One draw of held-out visit effects given the visit's sampled effects."""
    if len(obs_ks) == 0:
        chol = np.linalg.cholesky(kernels.add_jitter(cov[np.ix_(held_ks, held_ks)]))
        return chol @ rng.standard_normal(len(held_ks))
    c_oo = kernels.add_jitter(cov[np.ix_(obs_ks, obs_ks)])
    c_ho = cov[np.ix_(held_ks, obs_ks)]
    chol = np.linalg.cholesky(c_oo)
    tmp = solve_triangular(chol, c_ho.T, lower=True, check_finite=False)
    cond_mean = tmp.T @ solve_triangular(chol, gamma_obs, lower=True, check_finite=False)
    cond_cov = cov[np.ix_(held_ks, held_ks)] - tmp.T @ tmp
    chol_c = np.linalg.cholesky(kernels.add_jitter(cond_cov) + 1e-12 * np.eye(len(held_ks)))
    return cond_mean + chol_c @ rng.standard_normal(len(held_ks))


def predict_heldout(draws, plan, data, spec, rng=None, conditional=True):
    """Posterior predictive values for held-out points, one per draw.

    Follows the model's predicted-observation definition: population
    intercept and slope at the held-out superpixel plus the subject's
    effects, plus (for visit-effect models) the visit effect at that
    superpixel; no residual noise is added. The visit effect at an
    unobserved superpixel is drawn from the GP conditional on the same
    visit's sampled effects (``conditional=False`` draws it marginally, for
    sensitivity analysis); for models without visit effects the term is
    absent.

    Returns an (S_total, N_pred) array aligned with ``plan.points``.
    """
    if rng is None:
        rng = np.random.default_rng(plan.seed + 1)
    labs = data.grid.label_strings
    sids = data.subject_ids
    dist = pairwise_distances(data.grid)
    pooled = draws.chains.reshape(-1, draws.n_params)
    s_total = pooled.shape[0]

    out = np.empty((s_total, plan.n_points))
    # fixed-effect part: gather column indices once
    for j, (i, last, k) in enumerate(plan.points):
        lab = labs[k]
        t_pred = data.visit_times[i][last]
        a0 = pooled[:, draws.index(f"alpha0[{lab}]")]
        a1 = pooled[:, draws.index(f"alpha1[{lab}]")]
        b0 = pooled[:, draws.index(f"beta0[{sids[i]},{lab}]")]
        b1 = pooled[:, draws.index(f"beta1[{sids[i]},{lab}]")]
        out[:, j] = a0 + a1 * t_pred + b0 + b1 * t_pred

    if not spec.visit_effects:
        return out

    # group held-out points by (subject, visit) to krige each visit once
    by_visit = {}
    for j, (i, last, k) in enumerate(plan.points):
        by_visit.setdefault((i, last), []).append((j, k))
    gamma_cols = {}
    for (i, last), pts in by_visit.items():
        obs_idx = np.flatnonzero((data.subj == i) & (data.visit == last))
        names = [
            f"gamma[{sids[o_subj]},{last + 1},{labs[o_k]}]"
            for o_subj, o_k in zip(data.subj[obs_idx], data.k[obs_idx])
        ]
        gamma_cols[(i, last)] = (
            [pt[1] for pt in pts],
            [pt[0] for pt in pts],
            data.k[obs_idx],
            np.array([draws.index(nm) for nm in names], dtype=np.int64),
        )

    sd_col = draws.index("sigma_v")
    ell_col = draws.index("ell_v")
    for s in range(s_total):
        sd_v = pooled[s, sd_col]
        ell_v = pooled[s, ell_col]
        cov = sd_v**2 * kernels._matern_values(dist, spec.nu, ell_v)
        for (i, last), (held_ks, out_cols, obs_ks, gcols) in gamma_cols.items():
            gamma_obs = pooled[s, gcols]
            if conditional:
                gam = _gamma_conditional_draw(cov, obs_ks, held_ks, gamma_obs, rng)
            else:
                chol = np.linalg.cholesky(kernels.add_jitter(cov[np.ix_(held_ks, held_ks)]))
                gam = chol @ rng.standard_normal(len(held_ks))
            out[s, out_cols] += gam
    return out


def predict_slr(training, plan, n_draws, seed):
    """Flat-prior SLR posterior predictions for the held-out points.

    Each (subject, superpixel) profile in the training data is fit by
    ordinary least squares; predictions at the held-out time are drawn from
    the flat-prior posterior of (intercept, slope), with no residual noise
    added (matching the hierarchical models' predicted observations).
    """
    rng = np.random.default_rng(seed)
    out = np.empty((n_draws, plan.n_points))
    for j, (i, last, k) in enumerate(plan.points):
        mask = (training.subj == i) & (training.k == k)
        t_pred = training.visit_times[i][last]
        if np.count_nonzero(mask) < 3 or np.ptp(training.t[mask]) == 0:
            base = float(training.y[mask].mean()) if np.any(mask) else float(training.y.mean())
            out[:, j] = base
            continue
        intercepts, slopes, _ = model.slr_posterior_draws(
            training.y[mask], training.t[mask], n_draws, rng
        )
        out[:, j] = intercepts + slopes * t_pred
    return out


def mspe(predictions, plan, data):
    """Mean squared prediction error over all draws and held-out points."""
    predictions = np.asarray(predictions, dtype=float)
    if predictions.ndim != 2 or predictions.shape[1] != plan.n_points:
        raise ValueError("predictions must be (n_draws, n_heldout) aligned with the plan")
    truth = np.empty(plan.n_points)
    for j, (i, last, k) in enumerate(plan.points):
        mask = (data.subj == i) & (data.visit == last) & (data.k == k)
        idx = np.flatnonzero(mask)
        if len(idx) != 1:
            raise ValueError(f"held-out point {plan.points[j]} not found in the data")
        truth[j] = data.y[idx[0]]
    return float(np.mean((predictions - truth[None, :]) ** 2))


# ---------------------------------------------------------------------------
# slope classification
# ---------------------------------------------------------------------------


def classify_slopes(draws, data, total=True, level=0.95):
    """Classify each (subject, superpixel) slope by its credible interval.

    The classified quantity is the total slope (population + subject) by
    default; ``total=False`` classifies the subject deviation alone.
    Negative when the upper interval bound is below 0, positive when the
    lower bound is above 0, otherwise indeterminate.

    Returns a dict ``(subject_id, label) -> "negative" | "positive" |
    "indeterminate"``.
    """
    lo_q, hi_q = (1 - level) / 2, 1 - (1 - level) / 2
    labs = data.grid.label_strings
    out = {}
    for k, lab in enumerate(labs):
        alpha1 = draws.stacked(f"alpha1[{lab}]") if total else 0.0
        for i, sid in enumerate(data.subject_ids):
            slope = alpha1 + draws.stacked(f"beta1[{sid},{lab}]")
            lo, hi = np.quantile(slope, [lo_q, hi_q])
            if hi < 0:
                out[(sid, lab)] = "negative"
            elif lo > 0:
                out[(sid, lab)] = "positive"
            else:
                out[(sid, lab)] = "indeterminate"
    return out


def slope_classification_csv(classes, data, path):
    """Per-superpixel proportions of slope classes (plot-ready CSV)."""
    labs = data.grid.label_strings
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["superpixel", "negative", "positive", "indeterminate", "n"])
        for lab in labs:
            vals = [classes[(sid, lab)] for sid in data.subject_ids]
            n = len(vals)
            writer.writerow(
                [
                    lab,
                    repr(sum(v == "negative" for v in vals) / n),
                    repr(sum(v == "positive" for v in vals) / n),
                    repr(sum(v == "indeterminate" for v in vals) / n),
                    n,
                ]
            )


# ---------------------------------------------------------------------------
# SLR pointwise log likelihood (for information criteria)
# ---------------------------------------------------------------------------


def slr_pointwise_loglik(data, n_draws, seed):
    """Pointwise log-likelihood matrix for independent per-profile SLR fits.

    Profiles with fewer than 3 observations (or constant times) fall back to
    a normal centered at the profile mean with the pooled residual SD, so
    the matrix stays aligned with the full data record order.
    """
    rng = np.random.default_rng(seed)
    ll = np.empty((n_draws, data.n_obs))
    profiles = {}
    for o in range(data.n_obs):
        profiles.setdefault((int(data.subj[o]), int(data.k[o])), []).append(o)
    for (i, k), obs in profiles.items():
        obs = np.array(obs)
        t = data.t[obs]
        y = data.y[obs]
        if len(obs) >= 3 and np.ptp(t) > 0:
            intercepts, slopes, sigmas = model.slr_posterior_draws(y, t, n_draws, rng)
            sigmas = np.maximum(sigmas, 1e-6)
            mean = intercepts[:, None] + slopes[:, None] * t[None, :]
            z = (y[None, :] - mean) / sigmas[:, None]
            ll[:, obs] = -np.log(sigmas)[:, None] - 0.5 * model.LOG_2PI - 0.5 * z * z
        else:
            sd = max(float(np.std(y, ddof=1)) if len(y) > 1 else 1.0, 1e-3)
            z = (y[None, :] - float(np.mean(y))) / sd
            ll[:, obs] = -math.log(sd) - 0.5 * model.LOG_2PI - 0.5 * z * z
    return ll


# ---------------------------------------------------------------------------
# comparison table
# ---------------------------------------------------------------------------


@dataclass
class ComparisonTable:
    """Per-model comparison metrics mirroring the model-ladder layout."""

    rows: list  # dicts: model, visit_effects, population_logsd, subject_logsd, waic, loo, mspe, ...

    def write_csv(self, path):
        cols = [
            "model", "visit_effects", "superpixel_residual_sd", "subject_residual_sd",
            "waic", "loo", "mspe", "pareto_k_max", "pareto_k_flagged",
        ]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in self.rows:
                writer.writerow([row.get(c, "") for c in cols])

    def metric(self, model_name, key):
        for row in self.rows:
            if row["model"] == model_name:
                return row[key]
        raise KeyError(f"model {model_name!r} not in table")

    def render(self):
        header = f"{'model':<13}{'WAIC':>14}{'LOO':>14}{'MSPE':>10}  k>0.7"
        lines = [header]
        for row in self.rows:
            lines.append(
                f"{row['model']:<13}{row['waic']:>14.1f}{row['loo']:>14.1f}"
                f"{row['mspe']:>10.2f}  {row.get('pareto_k_flagged', 0)}"
            )
        return "\n".join(lines)
