"""Convergence diagnostics: rank-normalized split R-hat and bulk/tail ESS.

Implements the rank-normalization methodology of Vehtari, Gelman, Simpson,
Carpenter and Buerkner (2021): draws are converted to normal scores through
their pooled fractional ranks (Blom offsets, average ranks on ties), chains
are split in half, and the potential scale reduction factor and
autocorrelation-based effective sample size are computed on the transformed
splits. The headline R-hat is the larger of the bulk value and the value on
median-folded draws; tail ESS is the smaller of the 5% and 95% quantile
indicator ESS values. Constant draws have no defined rank distribution and
are reported as not-applicable sentinels, never as numbers.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import next_fast_len
from scipy.stats import norm, rankdata

__all__ = [
    "rank_normalize",
    "split_chains",
    "split_rhat",
    "rhat",
    "ess_bulk",
    "ess_tail",
    "group_report",
    "ConvergenceReport",
    "RHAT_THRESHOLD",
    "MIN_ESS_PER_CHAIN",
    "NOT_APPLICABLE",
]

RHAT_THRESHOLD = 1.01
MIN_ESS_PER_CHAIN = 100.0
NOT_APPLICABLE = "n/a"

# Reporting groups in table order.
GROUP_ORDER = (
    "Hyperparameters",
    "Population-level",
    "Intercepts",
    "Slopes",
    "Log Residual SDs",
    "Visit Effects",
)


def _require_draws(draws):
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2:
        raise ValueError("draws must be (n_chains, n_draws)")
    if draws.shape[0] < 2:
        raise ValueError("at least 2 chains are required")
    if draws.shape[1] < 4:
        raise ValueError("at least 4 draws per chain are required")
    return draws


def rank_normalize(draws):
    """Map draws to normal scores via pooled fractional ranks.

    Ranks are computed over all chains jointly (ties receive average ranks)
    and mapped through the standard normal quantile function with Blom
    offsets, ``z = Phi^-1((r - 3/8) / (S + 1/4))``.
    """
    draws = _require_draws(draws)
    ranks = rankdata(draws, method="average").reshape(draws.shape)
    return norm.ppf((ranks - 0.375) / (draws.size + 0.25))


def split_chains(draws):
    """Split every chain into halves, doubling the chain count."""
    draws = np.asarray(draws, dtype=float)
    half = draws.shape[1] // 2
    return np.vstack([draws[:, :half], draws[:, draws.shape[1] - half:]])


def _rhat_basic(splits):
    """Potential scale reduction factor over already-split chains."""
    m, s = splits.shape
    chain_means = splits.mean(axis=1)
    within = float(np.mean(splits.var(axis=1, ddof=1)))
    between = s * float(np.var(chain_means, ddof=1))
    if within == 0.0:
        return math.nan
    var_plus = within * (s - 1.0) / s + between / s
    return math.sqrt(var_plus / within)


def split_rhat(draws):
    """Split R-hat on rank-normalized draws (the bulk variant).

    Returns ``nan`` for constant draws (undefined, reported not-applicable).
    """
    draws = _require_draws(draws)
    if np.ptp(draws) == 0.0:
        return math.nan
    return _rhat_basic(rank_normalize(split_chains(draws)))


def rhat_folded(draws):
    """Split R-hat of median-folded, rank-normalized draws (tail variant)."""
    draws = _require_draws(draws)
    if np.ptp(draws) == 0.0:
        return math.nan
    folded = np.abs(draws - np.median(draws))
    return _rhat_basic(rank_normalize(split_chains(folded)))


def rhat(draws):
    """Headline R-hat: max of the bulk and folded split R-hat values."""
    bulk = split_rhat(draws)
    if math.isnan(bulk):
        return math.nan
    return max(bulk, rhat_folded(draws))


def _autocovariance(x):
    """Biased autocovariance of one chain via FFT."""
    n = len(x)
    m = next_fast_len(2 * n)
    centered = x - x.mean()
    spectrum = np.fft.rfft(centered, m)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), m)[:n].real
    return acov / n


def _ess_geyer(splits):
    """ESS over split chains using Geyer's initial monotone sequence."""
    m, s = splits.shape
    if np.ptp(splits) == 0.0:
        return math.nan
    acov = np.array([_autocovariance(splits[c]) for c in range(m)])
    chain_means = splits.mean(axis=1)
    mean_var = float(np.mean(acov[:, 0])) * s / (s - 1.0)
    var_plus = mean_var * (s - 1.0) / s
    if m > 1:
        var_plus += float(np.var(chain_means, ddof=1))
    if var_plus == 0.0:
        return math.nan

    rho = np.zeros(s)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - float(np.mean(acov[:, 1]))) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < s - 2 and (rho_even + rho_odd) >= 0.0:
        rho_even = 1.0 - (mean_var - float(np.mean(acov[:, t + 1]))) / var_plus
        rho_odd = 1.0 - (mean_var - float(np.mean(acov[:, t + 2]))) / var_plus
        rho[t + 1] = rho_even
        if (rho_even + rho_odd) >= 0.0:
            rho[t + 2] = rho_odd
        t += 2
    max_t = t
    # enforce monotone decreasing pair sums
    t = 1
    while t <= max_t - 2:
        if (rho[t + 1] + rho[t + 2]) > (rho[t - 1] + rho[t]):
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2
    tau = -1.0 + 2.0 * float(np.sum(rho[:max_t])) + float(np.sum(rho[max_t + 1:max_t + 2]))
    tau = max(tau, 1.0 / math.log10(m * s + 10.0))
    return (m * s) / tau


def ess_bulk(draws):
    """Bulk effective sample size on rank-normalized split chains."""
    draws = _require_draws(draws)
    if np.ptp(draws) == 0.0:
        return math.nan
    return _ess_geyer(rank_normalize(split_chains(draws)))


def ess_quantile(draws, prob):
    """ESS of the indicator of (draw <= pooled quantile at ``prob``)."""
    draws = _require_draws(draws)
    if np.ptp(draws) == 0.0:
        return math.nan
    indicator = (draws <= np.quantile(draws, prob)).astype(float)
    if np.ptp(indicator) == 0.0:
        return math.nan
    return _ess_geyer(rank_normalize(split_chains(indicator)))


def ess_tail(draws, probs=(0.05, 0.95)):
    """Tail effective sample size: min of the quantile ESS values."""
    values = [ess_quantile(draws, p) for p in probs]
    if any(math.isnan(v) for v in values):
        return math.nan
    return min(values)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceReport:
    """Per-parameter diagnostics with per-group aggregates and pass/fail."""

    rows: list  # (name, group, rhat, ess_bulk, ess_tail)
    n_chains: int
    n_draws: int
    rhat_threshold: float = RHAT_THRESHOLD
    min_ess_per_chain: float = MIN_ESS_PER_CHAIN
    skipped_groups: list = field(default_factory=list)

    @property
    def min_ess_total(self):
        return self.min_ess_per_chain * self.n_chains

    def row_passes(self, row):
        _, _, rh, eb, et = row
        if any(isinstance(v, float) and math.isnan(v) for v in (rh, eb, et)):
            return False
        return rh < self.rhat_threshold and eb > self.min_ess_total and et > self.min_ess_total

    @property
    def all_pass(self):
        return all(self.row_passes(r) for r in self.rows)

    def failing(self):
        return [r for r in self.rows if not self.row_passes(r)]

    def group_table(self):
        """Aggregates per reporting group: count, mean/min ESS, mean/max R-hat."""
        table = []
        groups = [g for g in GROUP_ORDER if any(r[1] == g for r in self.rows)]
        groups += sorted({r[1] for r in self.rows} - set(groups))
        for g in groups:
            rows = [r for r in self.rows if r[1] == g]
            rh = np.array([r[2] for r in rows])
            eb = np.array([r[3] for r in rows])
            et = np.array([r[4] for r in rows])
            table.append(
                {
                    "group": g,
                    "n": len(rows),
                    "bulk_ess_mean": float(np.nanmean(eb)) if not np.all(np.isnan(eb)) else math.nan,
                    "bulk_ess_min": float(np.nanmin(eb)) if not np.all(np.isnan(eb)) else math.nan,
                    "tail_ess_mean": float(np.nanmean(et)) if not np.all(np.isnan(et)) else math.nan,
                    "tail_ess_min": float(np.nanmin(et)) if not np.all(np.isnan(et)) else math.nan,
                    "rhat_mean": float(np.nanmean(rh)) if not np.all(np.isnan(rh)) else math.nan,
                    "rhat_max": float(np.nanmax(rh)) if not np.all(np.isnan(rh)) else math.nan,
                    "pass": all(self.row_passes(r) for r in rows),
                }
            )
        return table

    @staticmethod
    def _fmt(value, spec="{:.1f}"):
        if isinstance(value, float) and math.isnan(value):
            return NOT_APPLICABLE
        return spec.format(value)

    def render(self):
        lines = [
            f"Convergence: {self.n_chains} chains x {self.n_draws} draws; "
            f"thresholds: R-hat < {self.rhat_threshold}, "
            f"bulk/tail ESS > {self.min_ess_per_chain:g} per chain",
            f"{'Group':<18}{'#':>7}{'Bulk ESS mean':>15}{'min':>10}"
            f"{'Tail ESS mean':>15}{'min':>10}{'Rhat mean':>11}{'max':>8}  status",
        ]
        for g in self.group_table():
            lines.append(
                f"{g['group']:<18}{g['n']:>7}"
                f"{self._fmt(g['bulk_ess_mean']):>15}{self._fmt(g['bulk_ess_min']):>10}"
                f"{self._fmt(g['tail_ess_mean']):>15}{self._fmt(g['tail_ess_min']):>10}"
                f"{self._fmt(g['rhat_mean'], '{:.3f}'):>11}{self._fmt(g['rhat_max'], '{:.3f}'):>8}"
                f"  {'pass' if g['pass'] else 'FAIL'}"
            )
        for g in self.skipped_groups:
            lines.append(f"{g:<18} (empty group omitted)")
        lines.append(f"overall: {'pass' if self.all_pass else 'FAIL'}")
        return "\n".join(lines)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["parameter", "group", "rhat", "ess_bulk", "ess_tail", "pass"])
            for name, group, rh, eb, et in self.rows:
                writer.writerow(
                    [
                        name, group,
                        NOT_APPLICABLE if math.isnan(rh) else repr(rh),
                        NOT_APPLICABLE if math.isnan(eb) else repr(eb),
                        NOT_APPLICABLE if math.isnan(et) else repr(et),
                        int(self.row_passes((name, group, rh, eb, et))),
                    ]
                )


def group_report(draws, grouping=None, params=None):
    """Diagnose a :class:`PosteriorDraws`, grouped as in the reporting tables.

    Parameters
    ----------
    draws : PosteriorDraws
    grouping : dict, optional
        Parameter name -> group; defaults to the draw store's groups.
    params : sequence, optional
        Restrict to these parameters.

    Raises
    ------
    KeyError
        If ``params`` names unknown parameters.
    """
    import warnings

    grouping = dict(draws.groups if grouping is None else grouping)
    names = list(draws.names if params is None else params)
    for nm in names:
        if nm not in draws._index:
            raise KeyError(f"unknown parameter {nm!r}")
    rows = []
    for nm in names:
        arr = draws.get(nm)
        rows.append(
            (nm, grouping.get(nm, "?"), rhat(arr), ess_bulk(arr), ess_tail(arr))
        )
    present = {r[1] for r in rows}
    skipped = [g for g in GROUP_ORDER if g in set(grouping.values()) - present]
    for g in skipped:
        warnings.warn(f"convergence report: group {g!r} has no parameters", RuntimeWarning)
    return ConvergenceReport(
        rows=rows,
        n_chains=draws.n_chains,
        n_draws=draws.n_draws,
        skipped_groups=skipped,
    )
