"""Matern correlation functions and valid multivariate cross-covariances.

Each latent spatial process gets its own Matern marginal (SD, smoothness,
lengthscale). Cross-covariances between processes are built parsimoniously:
cross smoothness is the arithmetic mean of the marginals, cross lengthscale a
harmonic-type mean, and the cross covariance scale carries a normalizing
factor times an entry of a correlation matrix ``R``. Assembled over a finite
grid this yields one dense symmetric (P*K x P*K) matrix, stored in
*location-major* block layout: all P processes for superpixel 1, then all P
processes for superpixel 2, and so on.

Two variants of the cross-scale normalization are implemented (they differ in
whether the gamma-function denominator is a sum or a product of square
roots); both pass the nonnegative-definiteness audit when all smoothness
parameters equal 1/2, the default throughout.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma as _gamma
from scipy.special import kv as _bessel_kv

__all__ = [
    "MaternParams",
    "MultiMaternSpec",
    "CovarianceAuditError",
    "matern_correlation",
    "cross_smoothness",
    "cross_lengthscale",
    "cross_sigma",
    "assemble_cross_covariance",
    "assemble_univariate_covariance",
    "audit_nonnegative_definite",
    "add_jitter",
    "PD_AUDIT_RTOL",
    "DIAG_JITTER_REL",
]

# Relative eigenvalue tolerance for the positive-definiteness audit and
# relative diagonal jitter applied before factorization.
PD_AUDIT_RTOL = 1e-8
DIAG_JITTER_REL = 1e-10


class CovarianceAuditError(ValueError):
    """Raised when an assembled covariance fails the eigenvalue audit."""


def _matern_values(h, nu, ell):
    """Matern correlation on a validated ndarray of distances (hot path)."""
    if nu == 0.5:
        return np.exp(h / (-ell))
    if nu == 1.5:
        u = (math.sqrt(3.0) / ell) * h
        return (1.0 + u) * np.exp(-u)
    if nu == 2.5:
        u = (math.sqrt(5.0) / ell) * h
        return (1.0 + u + u * u / 3.0) * np.exp(-u)
    if np.isinf(nu):
        return np.exp(h * h / (-2.0 * ell * ell))
    u = (math.sqrt(2.0 * nu) / ell) * np.asarray(h)
    out = np.ones_like(u)
    pos = u > 0
    up = u[pos]
    out[pos] = (2.0 ** (1.0 - nu) / _gamma(nu)) * up**nu * _bessel_kv(nu, up)
    return out


def matern_correlation(h, nu, ell):
    """Matern correlation at distance ``h`` with smoothness ``nu``, lengthscale ``ell``.

    Uses the closed forms for nu in {1/2, 3/2, 5/2, inf} and the modified
    Bessel function of the second kind otherwise. ``nu = 1/2`` is the
    exponential kernel ``exp(-h/ell)``; ``nu = inf`` the squared-exponential.

    Parameters
    ----------
    h : array_like
        Nonnegative distances.
    nu : float
        Smoothness, > 0 (or ``inf``).
    ell : float
        Lengthscale, > 0. At ``h = ell`` the exponential kernel equals
        ``exp(-1)``.

    Returns
    -------
    ndarray or float in (0, 1], with value 1 at h = 0.
    """
    if not nu > 0:
        raise ValueError(f"smoothness must be positive, got {nu}")
    if not ell > 0:
        raise ValueError(f"lengthscale must be positive, got {ell}")
    h = np.asarray(h, dtype=float)
    scalar = h.ndim == 0
    h = np.atleast_1d(h)
    if np.any(h < 0):
        raise ValueError("distances must be nonnegative")
    out = _matern_values(h, nu, ell)
    return float(out[0]) if scalar else out


def cross_smoothness(nu_p, nu_q):
    """Cross-process smoothness: the arithmetic mean of the marginals."""
    if not (nu_p > 0 and nu_q > 0):
        raise ValueError("smoothness parameters must be positive")
    return 0.5 * (nu_p + nu_q)


def cross_lengthscale(ell_p, ell_q):
    """Cross-process lengthscale ``sqrt(2 / (ell_p^-2 + ell_q^-2))``.

    A harmonic-type mean: equals ``ell`` when both inputs are ``ell`` and
    never exceeds the larger input.
    """
    if not (ell_p > 0 and ell_q > 0):
        raise ValueError("lengthscales must be positive")
    return math.sqrt(2.0 / (ell_p**-2 + ell_q**-2))


@dataclass(frozen=True)
class MaternParams:
    """Marginal Matern parameters: smoothness, lengthscale, and SD."""

    nu: float
    ell: float
    sd: float

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"smoothness must be positive, got {self.nu}")
        if not self.ell > 0:
            raise ValueError(f"lengthscale must be positive, got {self.ell}")
        if self.sd < 0:
            raise ValueError(f"SD must be nonnegative, got {self.sd}")


@dataclass(frozen=True)
class MultiMaternSpec:
    """Marginal Matern parameters for P processes plus a cross-correlation matrix.

    Attributes
    ----------
    sd : ndarray, shape (P,)
        Marginal SDs (sigma_pp), nonnegative.
    nu : ndarray, shape (P,)
        Marginal smoothness parameters, positive.
    ell : ndarray, shape (P,)
        Marginal lengthscales, positive.
    corr : ndarray, shape (P, P)
        Symmetric cross-correlation matrix with unit diagonal, off-diagonals
        in [-1, 1], nonnegative definite.
    sigma_form : str
        ``"sum"`` or ``"product"``: gamma-denominator variant used in the
        cross covariance scale.
    """

    sd: np.ndarray
    nu: np.ndarray
    ell: np.ndarray
    corr: np.ndarray
    sigma_form: str = "sum"

    def __post_init__(self):
        sd = np.atleast_1d(np.asarray(self.sd, dtype=float))
        nu = np.atleast_1d(np.asarray(self.nu, dtype=float))
        ell = np.atleast_1d(np.asarray(self.ell, dtype=float))
        corr = np.asarray(self.corr, dtype=float)
        p = sd.shape[0]
        if nu.shape != (p,) or ell.shape != (p,) or corr.shape != (p, p):
            raise ValueError("inconsistent multivariate Matern shapes")
        if np.any(sd < 0):
            raise ValueError("SDs must be nonnegative")
        if np.any(nu <= 0) or np.any(ell <= 0):
            raise ValueError("smoothness and lengthscales must be positive")
        if not np.allclose(corr, corr.T, atol=1e-12):
            raise ValueError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(corr), 1.0, atol=1e-12):
            raise ValueError("correlation matrix must have unit diagonal")
        if np.any(np.abs(corr) > 1.0 + 1e-12):
            raise ValueError("correlations must lie in [-1, 1]")
        if np.linalg.eigvalsh(corr).min() < -1e-10:
            raise ValueError("correlation matrix must be nonnegative definite")
        if self.sigma_form not in ("sum", "product"):
            raise ValueError(f"unknown sigma_form {self.sigma_form!r}")
        object.__setattr__(self, "sd", sd)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "ell", ell)
        object.__setattr__(self, "corr", corr)

    @property
    def n_processes(self):
        return self.sd.shape[0]


def _cross_sigma_scalar(sd_p, sd_q, nu_p, nu_q, ell_p, ell_q, r_pq, sigma_form):
    nu_pq = 0.5 * (nu_p + nu_q)
    ell_pq = math.sqrt(2.0 / (ell_p**-2 + ell_q**-2))
    gp = math.gamma(nu_p)
    gq = math.gamma(nu_q)
    if sigma_form == "sum":
        denom = math.sqrt(gp) + math.sqrt(gq)
    else:
        denom = math.sqrt(gp * gq)
    scale = ell_pq / math.sqrt(ell_p * ell_q)
    return sd_p * sd_q * scale * math.gamma(nu_pq) / denom * r_pq


def cross_sigma(spec, p, q):
    """Cross covariance scale sigma_pq between processes ``p != q``.

    ``sigma_pq = sd_p * sd_q * [ell_pq / sqrt(ell_p ell_q)]
    * Gamma(nu_pq) / D * R_pq`` where ``D`` is
    ``sqrt(Gamma(nu_p)) + sqrt(Gamma(nu_q))`` for ``sigma_form="sum"`` and
    ``sqrt(Gamma(nu_p) * Gamma(nu_q))`` for ``"product"``.
    """
    if p == q:
        raise ValueError("cross_sigma is defined for p != q; use sd[p]**2 on the diagonal")
    return _cross_sigma_scalar(
        spec.sd[p], spec.sd[q], spec.nu[p], spec.nu[q],
        spec.ell[p], spec.ell[q], spec.corr[p, q], spec.sigma_form,
    )


def assemble_unchecked(sd, nu, ell, corr, sigma_form, dist):
    """Cross-covariance assembly without spec validation (sampler hot path).

    Callers guarantee structurally valid inputs; support violations surface
    through the prior (non-positive-definite R has prior density zero) or a
    failed factorization downstream.
    """
    p_n = len(sd)
    k = dist.shape[0]
    big = np.empty((p_n * k, p_n * k))
    for p in range(p_n):
        big[p::p_n, p::p_n] = sd[p] ** 2 * _matern_values(dist, nu[p], ell[p])
        for q in range(p + 1, p_n):
            spq = _cross_sigma_scalar(
                sd[p], sd[q], nu[p], nu[q], ell[p], ell[q], corr[p, q], sigma_form
            )
            block = spq * _matern_values(
                dist, 0.5 * (nu[p] + nu[q]), math.sqrt(2.0 / (ell[p]**-2 + ell[q]**-2))
            )
            big[p::p_n, q::p_n] = block
            big[q::p_n, p::p_n] = block.T
    return big


def assemble_cross_covariance(spec, dist, audit=False):
    """Dense (P*K x P*K) cross-covariance over a grid, location-major blocks.

    Entry ``[(k, p), (k', q)]`` (at flat index ``k*P + p``) is
    ``sd_p**2 * M(h_kk' | nu_p, ell_p)`` when ``p == q`` and
    ``sigma_pq * M(h_kk' | nu_pq, ell_pq)`` otherwise.

    Parameters
    ----------
    spec : MultiMaternSpec
    dist : ndarray, shape (K, K)
        Pairwise distances.
    audit : bool
        If True, run the eigenvalue audit and raise
        :class:`CovarianceAuditError` on failure.
    """
    dist = np.asarray(dist, dtype=float)
    k = dist.shape[0]
    if dist.shape != (k, k):
        raise ValueError("distance matrix must be square")
    big = assemble_unchecked(spec.sd, spec.nu, spec.ell, spec.corr, spec.sigma_form, dist)
    if audit:
        audit_nonnegative_definite(big, context=f"spec={spec!r}")
    return big


def assemble_univariate_covariance(params, dist, audit=False):
    """K x K covariance ``sd**2 * M(dist | nu, ell)`` for a single process."""
    dist = np.asarray(dist, dtype=float)
    cov = params.sd**2 * matern_correlation(dist, params.nu, params.ell)
    if audit:
        audit_nonnegative_definite(cov, context=f"params={params!r}")
    return cov


def audit_nonnegative_definite(cov, rtol=PD_AUDIT_RTOL, context=""):
    """Check ``min eigenvalue >= -rtol * max eigenvalue``; raise on failure.

    Returns the (min, max) eigenvalues so callers can log margins.
    """
    eigs = np.linalg.eigvalsh(np.asarray(cov, dtype=float))
    lo, hi = eigs[0], eigs[-1]
    if hi <= 0 and lo < -rtol:  # all-zero matrices (sd = 0) pass
        raise CovarianceAuditError(
            f"covariance has no positive eigenvalues (min={lo:.3e}); {context}"
        )
    if lo < -rtol * max(hi, 0.0):
        raise CovarianceAuditError(
            f"covariance fails nonnegative-definiteness audit: "
            f"min eig {lo:.6e} < -{rtol:.1e} * max eig {hi:.6e}; {context}"
        )
    return lo, hi


def add_jitter(cov, rel=DIAG_JITTER_REL):
    """Return a copy with ``rel * diagonal`` added to the diagonal.

    Guards Cholesky factorization against numerically semidefinite matrices
    at long lengthscales; the relative form keeps the jitter proportional to
    each process variance.
    """
    return jitter_inplace(np.array(cov, dtype=float, copy=True), rel)


def jitter_inplace(cov, rel=DIAG_JITTER_REL):
    """In-place variant of :func:`add_jitter` for freshly assembled matrices."""
    diag = np.einsum("ii->i", cov)
    diag += rel * np.abs(diag)
    return cov
