"""Internal sampling engine state: parameter layout, caches, and deltas.

The sampler works on one flat parameter vector ``theta`` holding, in order,
the population field (location-major), every subject's effects, and the
visit effects (aligned with observation order). Around it the workspace
maintains the caches that make blocked Metropolis updates cheap:

* per-observation model means, log residual SDs, and inverse SDs;
* per Gaussian prior group g (the population field, each subject's effects,
  each visit's effects) the precision matrix ``Q_g`` of its prior, the
  vector ``v_g = Q_g (x_g - m_g)``, and the quadratic form
  ``(x_g - m_g)' Q_g (x_g - m_g)``.

A proposal that shifts a handful of coordinates then costs a few dot
products against ``v`` and ``Q`` plus the Gaussian log-likelihood over the
touched observations; hyperparameter proposals refactorize one covariance
and reuse everything else. All caches are refreshed from scratch on
hyperparameter accepts and periodically during sampling, and a debug mode
verifies them against full recomputation.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import kernels, model
from .grid import pairwise_distances

LOG_2PI = model.LOG_2PI

# per-slot initial random-walk proposal scales by process
_INIT_SCALE = {"alpha0": 2.0, "alpha1": 0.5, "phi": 0.15,
               "beta0": 1.5, "beta1": 0.4, "sigma_subj": 0.15, "gamma": 1.0}


def build_param_names(data, spec):
    """Canonical parameter names and reporting groups for a (data, spec) pair.

    Returns ``(head_names, theta_names, groups)`` where the head covers the
    globals and kernel hyperparameters and theta covers the latent effects in
    the sampler's flat layout.
    """
    labs = data.grid.label_strings
    sids = data.subject_ids
    p_a, p_b = spec.p_alpha, spec.p_beta
    head = ["mu0", "mu1", "mu_phi"]
    for side, p_n in (("alpha", p_a), ("beta", p_b)):
        head += [f"sigma_{side}_{p+1}{p+1}" for p in range(p_n)]
        head += [f"ell_{side}_{p+1}" for p in range(p_n)]
        head += [f"R_{side}_{p+1}{q+1}" for p in range(p_n) for q in range(p + 1, p_n)]
    if spec.visit_effects:
        head += ["sigma_v", "ell_v"]

    proc_a = ["alpha0", "alpha1", "phi"][:p_a]
    proc_b = ["beta0", "beta1", "sigma_subj"][:p_b]
    k_n = data.grid.n_superpixels
    names = [f"{proc_a[p]}[{labs[k]}]" for k in range(k_n) for p in range(p_a)]
    for i in range(data.n_subjects):
        names += [f"{proc_b[p]}[{sids[i]},{labs[k]}]" for k in range(k_n) for p in range(p_b)]
    if spec.visit_effects:
        names += [
            f"gamma[{sids[data.subj[o]]},{int(data.visit[o]) + 1},{labs[data.k[o]]}]"
            for o in range(data.n_obs)
        ]

    groups = {nm: "Hyperparameters" for nm in head}
    prefix_group = {
        "alpha0": "Population-level", "alpha1": "Population-level", "phi": "Population-level",
        "beta0": "Intercepts", "beta1": "Slopes", "sigma_subj": "Log Residual SDs",
        "gamma": "Visit Effects",
    }
    for nm in names:
        groups[nm] = prefix_group[nm.split("[", 1)[0]]
    return head, names, groups


def head_values_of(state, spec):
    """Head-parameter values of a state, aligned with ``build_param_names``."""
    vals = [state.mu0, state.mu1, state.mu_phi]
    for sd, ell, corr, p_n in (
        (state.sd_alpha, state.ell_alpha, state.R_alpha, spec.p_alpha),
        (state.sd_beta, state.ell_beta, state.R_beta, spec.p_beta),
    ):
        vals += list(sd) + list(ell)
        vals += [corr[p, q] for p in range(p_n) for q in range(p + 1, p_n)]
    if spec.visit_effects:
        vals += [state.sd_v, state.ell_v]
    return np.array(vals, dtype=float)


def theta_of(state, spec):
    """Latent effects of a state flattened into the sampler layout."""
    parts = [state.alpha, state.beta.ravel()]
    if spec.visit_effects:
        parts.append(state.gamma)
    return np.concatenate(parts)


def named_vector_of(state, data, spec):
    """dict of parameter name -> value for a full state."""
    head, names, _ = build_param_names(data, spec)
    values = np.concatenate([head_values_of(state, spec), theta_of(state, spec)])
    return dict(zip(head + names, values))


@dataclass
class FamilyTables:
    """Static description of one sweep family's sub-blocks."""

    name: str
    b_ptr: np.ndarray
    b_params: np.ndarray
    b_choloff: np.ndarray
    init_scales: np.ndarray

    @property
    def n_blocks(self):
        return len(self.b_ptr) - 1

    @property
    def total_slots(self):
        return int(self.b_ptr[-1])

    @property
    def total_packed(self):
        return int(self.b_choloff[-1]) if len(self.b_choloff) else 0


def _pack_blocks(name, blocks, scales):
    sizes = np.array([len(b) for b in blocks], dtype=np.int64)
    b_ptr = np.zeros(len(blocks) + 1, dtype=np.int64)
    np.cumsum(sizes, out=b_ptr[1:])
    packed = np.concatenate([[0], np.cumsum(sizes**2)]).astype(np.int64)
    params = np.concatenate(blocks).astype(np.int64) if blocks else np.zeros(0, np.int64)
    init = np.concatenate(scales).astype(float) if scales else np.zeros(0)
    return FamilyTables(name=name, b_ptr=b_ptr, b_params=params,
                        b_choloff=packed, init_scales=init)


class ModelWorkspace:
    """Sampling state for one (dataset, model spec) pair."""

    def __init__(self, data, spec):
        data.require_positive()
        self.data = data
        self.spec = spec
        self.grid = data.grid
        self.dist = pairwise_distances(self.grid)
        self.K = self.grid.n_superpixels
        self.n = data.n_subjects
        self.N = data.n_obs
        self.Pa = spec.p_alpha
        self.Pb = spec.p_beta
        self.A = self.Pa * self.K
        self.B = self.Pb * self.K

        self.alpha_off = 0
        self.beta_off = self.A
        self.gamma_off = self.A + self.n * self.B
        self.n_theta = self.gamma_off + (self.N if spec.visit_effects else 0)

        self._build_visits()
        self._build_groups()
        self._build_param_columns()
        self._build_names()

        self.theta = np.zeros(self.n_theta)
        self.v = np.zeros(self.n_theta)
        self.g_quad = np.zeros(self.G)
        self.mean = np.zeros(self.N)
        self.logsd = np.zeros(self.N)
        self.inv_sd = np.ones(self.N)
        self.q_flat = np.zeros(self.q_size)

        # sweep scratch, reused across blocks
        self.sc_dm = np.zeros(self.N)
        self.sc_ds = np.zeros(self.N)
        self.sc_touch = np.zeros(max(self.N, 1), dtype=np.int64)
        self.sc_flag = np.zeros(max(self.N, 1), dtype=np.uint8)

        self.state = None
        self.chol_alpha = None
        self.logdet_alpha = None
        self.chol_beta = None
        self.logdet_beta = None
        self.pattern_chols = []
        self.pattern_logdets = np.zeros(len(self.patterns))
        self.visit_logdet_sum = 0.0
        self.m_alpha = np.zeros(self.A)
        self.Qu = np.zeros((self.Pa, self.A))
        self.Bpp = np.zeros(self.Pa)

    # -- layout ------------------------------------------------------------

    def _build_visits(self):
        data = self.data
        starts, subj_v, vidx_v = [], [], []
        prev = None
        for o in range(self.N):
            key = (int(data.subj[o]), int(data.visit[o]))
            if key != prev:
                starts.append(o)
                subj_v.append(key[0])
                vidx_v.append(key[1])
                prev = key
        self.visit_start = np.array(starts + [self.N], dtype=np.int64)
        self.visit_subj = np.array(subj_v, dtype=np.int64)
        self.visit_vidx = np.array(vidx_v, dtype=np.int64)
        self.V = len(subj_v)

        self.patterns = []
        self.visit_pid = np.zeros(self.V, dtype=np.int64)
        registry = {}
        for vi in range(self.V):
            ks = tuple(int(x) for x in data.k[self.visit_start[vi]:self.visit_start[vi + 1]])
            pid = registry.get(ks)
            if pid is None:
                pid = len(self.patterns)
                registry[ks] = pid
                self.patterns.append(np.array(ks, dtype=np.int64))
            self.visit_pid[vi] = pid
        # per pattern: visit list and an (n_visits, m) observation gather map
        self.pattern_visits = []
        self.pattern_gather = []
        for pid, pat in enumerate(self.patterns):
            visits = np.flatnonzero(self.visit_pid == pid)
            self.pattern_visits.append(visits)
            gather = np.empty((len(visits), len(pat)), dtype=np.int64)
            for row, vi in enumerate(visits):
                gather[row] = np.arange(self.visit_start[vi], self.visit_start[vi + 1])
            self.pattern_gather.append(gather)

    def _build_groups(self):
        spec = self.spec
        self.n_visit_groups = self.V if spec.visit_effects else 0
        self.G = 1 + self.n + self.n_visit_groups
        self.g_voff = np.zeros(self.G, dtype=np.int64)
        self.g_dim = np.zeros(self.G, dtype=np.int64)
        self.g_qoff = np.zeros(self.G, dtype=np.int64)
        self.g_voff[0], self.g_dim[0], self.g_qoff[0] = 0, self.A, 0
        qoff_beta = self.A * self.A
        for i in range(self.n):
            self.g_voff[1 + i] = self.beta_off + i * self.B
            self.g_dim[1 + i] = self.B
            self.g_qoff[1 + i] = qoff_beta
        qoff = qoff_beta + self.B * self.B
        self.pattern_qoff = []
        for pat in self.patterns:
            self.pattern_qoff.append(qoff)
            if spec.visit_effects:
                qoff += len(pat) ** 2
        self.q_size = qoff if spec.visit_effects else qoff_beta + self.B * self.B
        if spec.visit_effects:
            for vi in range(self.V):
                g = 1 + self.n + vi
                self.g_voff[g] = self.gamma_off + self.visit_start[vi]
                self.g_dim[g] = self.visit_start[vi + 1] - self.visit_start[vi]
                self.g_qoff[g] = self.pattern_qoff[self.visit_pid[vi]]

        self.pgroup = np.zeros(self.n_theta, dtype=np.int64)
        self.pgidx = np.zeros(self.n_theta, dtype=np.int64)
        self.pgroup[: self.A] = 0
        self.pgidx[: self.A] = np.arange(self.A)
        for i in range(self.n):
            sl = slice(self.beta_off + i * self.B, self.beta_off + (i + 1) * self.B)
            self.pgroup[sl] = 1 + i
            self.pgidx[sl] = np.arange(self.B)
        if spec.visit_effects:
            for vi in range(self.V):
                sl = slice(self.gamma_off + self.visit_start[vi], self.gamma_off + self.visit_start[vi + 1])
                self.pgroup[sl] = 1 + self.n + vi
                self.pgidx[sl] = np.arange(self.g_dim[1 + self.n + vi])

    def _build_param_columns(self):
        """Sparse mean/log-SD effect columns of every theta parameter."""
        data, spec = self.data, self.spec
        obs_by_k = [[] for _ in range(self.K)]
        obs_by_profile = {}
        for o in range(self.N):
            obs_by_k[data.k[o]].append(o)
            obs_by_profile.setdefault((int(data.subj[o]), int(data.k[o])), []).append(o)

        mean_cols = [()] * self.n_theta
        mean_coefs = [()] * self.n_theta
        sd_cols = [()] * self.n_theta
        for k in range(self.K):
            obs = obs_by_k[k]
            base = k * self.Pa
            mean_cols[base] = obs
            mean_coefs[base] = [1.0] * len(obs)
            mean_cols[base + 1] = obs
            mean_coefs[base + 1] = [float(data.t[o]) for o in obs]
            if spec.population_logsd:
                sd_cols[base + 2] = obs
        for i in range(self.n):
            for k in range(self.K):
                obs = obs_by_profile.get((i, k), [])
                base = self.beta_off + i * self.B + k * self.Pb
                mean_cols[base] = obs
                mean_coefs[base] = [1.0] * len(obs)
                mean_cols[base + 1] = obs
                mean_coefs[base + 1] = [float(data.t[o]) for o in obs]
                if spec.subject_logsd:
                    sd_cols[base + 2] = obs
        if spec.visit_effects:
            for o in range(self.N):
                mean_cols[self.gamma_off + o] = [o]
                mean_coefs[self.gamma_off + o] = [1.0]

        self.pm_ptr = np.zeros(self.n_theta + 1, dtype=np.int64)
        np.cumsum([len(c) for c in mean_cols], out=self.pm_ptr[1:])
        self.pm_obs = np.array([o for c in mean_cols for o in c], dtype=np.int64)
        self.pm_coef = np.array([x for c in mean_coefs for x in c], dtype=float)
        self.ps_ptr = np.zeros(self.n_theta + 1, dtype=np.int64)
        np.cumsum([len(c) for c in sd_cols], out=self.ps_ptr[1:])
        self.ps_obs = np.array([o for c in sd_cols for o in c], dtype=np.int64)
        self._obs_by_profile = obs_by_profile

    def _build_names(self):
        head, names, groups = build_param_names(self.data, self.spec)
        self.head_names = head
        self.theta_names = names
        self.param_names = head + names
        self.param_groups = groups

    # -- sweep family construction ------------------------------------------

    def build_families(self):
        """Sub-block tables for the effect sweeps, in update order."""
        spec = self.spec
        fams = []

        blocks, scales = [], []
        for k in range(self.K):
            base = k * self.Pa
            idx = [base, base + 1] + ([base + 2] if spec.population_logsd else [])
            sc = [_INIT_SCALE["alpha0"], _INIT_SCALE["alpha1"]] + (
                [_INIT_SCALE["phi"]] if spec.population_logsd else []
            )
            blocks.append(idx)
            scales.append(sc)
        fams.append(_pack_blocks("population", blocks, scales))

        first_visit_gamma = {}
        if spec.visit_effects:
            for vi in range(self.V):
                if self.visit_vidx[vi] == 0:
                    for o in range(self.visit_start[vi], self.visit_start[vi + 1]):
                        first_visit_gamma[(int(self.visit_subj[vi]), int(self.data.k[o]))] = o
        blocks, scales = [], []
        for i in range(self.n):
            for k in range(self.K):
                base = self.beta_off + i * self.B + k * self.Pb
                idx = [base, base + 1]
                sc = [_INIT_SCALE["beta0"], _INIT_SCALE["beta1"]]
                o = first_visit_gamma.get((i, k))
                if o is not None:
                    idx.append(self.gamma_off + o)
                    sc.append(_INIT_SCALE["gamma"])
                blocks.append(idx)
                scales.append(sc)
        fams.append(_pack_blocks("subject", blocks, scales))

        if spec.subject_logsd:
            blocks, scales = [], []
            for i in range(self.n):
                for lo in range(0, self.K, 6):
                    ks = range(lo, min(lo + 6, self.K))
                    blocks.append([self.beta_off + i * self.B + k * self.Pb + 2 for k in ks])
                    scales.append([_INIT_SCALE["sigma_subj"]] * len(list(ks)))
            fams.append(_pack_blocks("subject_sd", blocks, scales))

        if spec.visit_effects:
            blocks, scales = [], []
            for vi in range(self.V):
                if self.visit_vidx[vi] == 0:
                    continue  # first-visit effects ride with the subject blocks
                for lo in range(self.visit_start[vi], self.visit_start[vi + 1], 3):
                    hi = min(lo + 3, self.visit_start[vi + 1])
                    blocks.append([self.gamma_off + o for o in range(lo, hi)])
                    scales.append([_INIT_SCALE["gamma"]] * (hi - lo))
            fams.append(_pack_blocks("visit", blocks, scales))
        return fams

    # -- state loading and cache refresh -------------------------------------

    def load_state(self, state):
        """Install a parameter state and rebuild every cache. Raises on an
        invalid state (nonpositive scales, failed factorization)."""
        spec = self.spec
        if state.alpha.shape != (self.A,) or state.beta.shape != (self.n, self.B):
            raise ValueError("state arrays do not match the model layout")
        if spec.visit_effects and (state.gamma is None or state.gamma.shape != (self.N,)):
            raise ValueError("state gamma does not match the observations")
        self.state = state.copy()
        self.theta[: self.A] = state.alpha
        self.theta[self.beta_off:self.gamma_off] = state.beta.ravel()
        if spec.visit_effects:
            self.theta[self.gamma_off:] = state.gamma
        # keep the state arrays as views into theta so commits stay in sync
        self.state.alpha = self.theta[: self.A]
        self.state.beta = self.theta[self.beta_off:self.gamma_off].reshape(self.n, self.B)
        if spec.visit_effects:
            self.state.gamma = self.theta[self.gamma_off:]
        self._rebuild_alpha_side(state.sd_alpha, state.ell_alpha, state.R_alpha)
        self._rebuild_beta_side(state.sd_beta, state.ell_beta, state.R_beta)
        if spec.visit_effects:
            self._rebuild_visit_side(state.sd_v, state.ell_v)
        self.refresh_lik_caches()
        self.refresh_prior_caches()

    def extract_state(self):
        return self.state.copy()

    def head_values(self):
        return head_values_of(self.state, self.spec)

    def record_vector(self, out=None):
        head = self.head_values()
        if out is None:
            out = np.empty(len(head) + self.n_theta)
        out[: len(head)] = head
        out[len(head):] = self.theta
        return out

    def refresh_lik_caches(self):
        st, spec, data = self.state, self.spec, self.data
        mean, logsd = model._mean_and_logsd(st, data, spec)
        self.mean[:] = mean
        self.logsd[:] = logsd
        self.inv_sd[:] = np.exp(-logsd)

    def refresh_prior_caches(self):
        self._refresh_alpha_prior()
        self._refresh_beta_prior()
        if self.spec.visit_effects:
            self._refresh_visit_prior()

    # -- per-side rebuilds ----------------------------------------------------

    def _assemble_side(self, sd, ell, corr, p_n):
        cov = kernels.jitter_inplace(
            kernels.assemble_unchecked(
                np.asarray(sd, dtype=float), np.full(p_n, self.spec.nu),
                np.asarray(ell, dtype=float), np.asarray(corr, dtype=float),
                self.spec.sigma_form, self.dist,
            )
        )
        chol = np.linalg.cholesky(cov)
        return chol, 2.0 * float(np.sum(np.log(np.einsum("ii->i", chol))))

    def _rebuild_alpha_side(self, sd, ell, corr):
        chol, logdet = self._assemble_side(sd, ell, corr, self.Pa)
        self.chol_alpha, self.logdet_alpha = chol, logdet
        self.state.sd_alpha = np.asarray(sd, dtype=float).copy()
        self.state.ell_alpha = np.asarray(ell, dtype=float).copy()
        self.state.R_alpha = np.asarray(corr, dtype=float).copy()
        q = cho_solve((chol, True), np.eye(self.A), check_finite=False)
        self.q_flat[: self.A * self.A] = q.ravel()
        self._q_alpha = q
        for p in range(self.Pa):
            u = np.zeros(self.A)
            u[p::self.Pa] = 1.0
            self.Qu[p] = q @ u
            self.Bpp[p] = float(u @ self.Qu[p])
        self._refresh_alpha_prior()

    def _rebuild_beta_side(self, sd, ell, corr):
        chol, logdet = self._assemble_side(sd, ell, corr, self.Pb)
        self.chol_beta, self.logdet_beta = chol, logdet
        self.state.sd_beta = np.asarray(sd, dtype=float).copy()
        self.state.ell_beta = np.asarray(ell, dtype=float).copy()
        self.state.R_beta = np.asarray(corr, dtype=float).copy()
        q = cho_solve((chol, True), np.eye(self.B), check_finite=False)
        off = self.A * self.A
        self.q_flat[off:off + self.B * self.B] = q.ravel()
        self._q_beta = q
        self._refresh_beta_prior()

    def _visit_cov(self, sd_v, ell_v):
        return kernels.jitter_inplace(
            sd_v**2 * kernels._matern_values(self.dist, self.spec.nu, ell_v)
        )

    def _rebuild_visit_side(self, sd_v, ell_v):
        cov = self._visit_cov(sd_v, ell_v)
        chols, logdets = [], np.zeros(len(self.patterns))
        for pid, pat in enumerate(self.patterns):
            chol = np.linalg.cholesky(cov[np.ix_(pat, pat)])
            chols.append(chol)
            logdets[pid] = 2.0 * float(np.sum(np.log(np.diag(chol))))
        self.pattern_chols = chols
        self.pattern_logdets = logdets
        self.state.sd_v = float(sd_v)
        self.state.ell_v = float(ell_v)
        self._q_patterns = []
        for pid, pat in enumerate(self.patterns):
            m = len(pat)
            q = cho_solve((chols[pid], True), np.eye(m), check_finite=False)
            self._q_patterns.append(q)
            off = self.pattern_qoff[pid]
            self.q_flat[off:off + m * m] = q.ravel()
        self.visit_logdet_sum = float(np.sum(logdets[self.visit_pid])) if self.V else 0.0
        self._refresh_visit_prior()

    def _refresh_alpha_prior(self):
        mu = np.array([self.state.mu0, self.state.mu1, self.state.mu_phi])[: self.Pa]
        self.m_alpha = np.tile(mu, self.K)
        r = self.theta[: self.A] - self.m_alpha
        self.v[: self.A] = self._q_alpha @ r
        self.g_quad[0] = float(r @ self.v[: self.A])

    def _refresh_beta_prior(self):
        betas = self.theta[self.beta_off:self.gamma_off].reshape(self.n, self.B)
        vb = betas @ self._q_beta
        self.v[self.beta_off:self.gamma_off] = vb.ravel()
        self.g_quad[1:1 + self.n] = np.sum(betas * vb, axis=1)

    def _refresh_visit_prior(self):
        gamma = self.theta[self.gamma_off:]
        v_gamma = self.v[self.gamma_off:]
        for pid in range(len(self.patterns)):
            gather = self.pattern_gather[pid]
            gmat = gamma[gather]  # (n_visits, m)
            vmat = gmat @ self._q_patterns[pid]
            v_gamma[gather.ravel()] = vmat.ravel()
            self.g_quad[1 + self.n + self.pattern_visits[pid]] = np.sum(gmat * vmat, axis=1)

    # -- cached posterior value ----------------------------------------------

    def loglik_cached(self):
        z = (self.data.y - self.mean) * self.inv_sd
        return float(np.sum(-self.logsd - 0.5 * LOG_2PI - 0.5 * z * z))

    def pointwise_loglik_cached(self, out=None):
        z = (self.data.y - self.mean) * self.inv_sd
        res = -self.logsd - 0.5 * LOG_2PI - 0.5 * z * z
        if out is None:
            return res
        out[:] = res
        return out

    def scalar_prior_sum(self):
        st, spec = self.state, self.spec
        pc = spec.priors
        lp = model.normal_logpdf(st.mu0, pc.mu0_mean, pc.mu0_sd)
        lp += model.normal_logpdf(st.mu1, pc.mu1_mean, pc.mu1_sd)
        lp += model.normal_logpdf(st.mu_phi, pc.mu_phi_mean, pc.mu_phi_sd)
        for sd, ell, corr in ((st.sd_alpha, st.ell_alpha, st.R_alpha),
                              (st.sd_beta, st.ell_beta, st.R_beta)):
            scales = [pc.sd_intercept_scale, pc.sd_other_scale, pc.sd_other_scale]
            for p in range(len(sd)):
                lp += model.half_normal_logpdf(sd[p], scales[p])
                lp += model.inverse_gamma_logpdf(ell[p], pc.ell_shape, pc.ell_scale)
            lp += model.correlation_prior_logdensity(corr)
        if spec.visit_effects:
            lp += model.half_normal_logpdf(st.sd_v, pc.sd_other_scale)
            lp += model.inverse_gamma_logpdf(st.ell_v, pc.ell_shape, pc.ell_scale)
        return lp

    def cached_log_posterior(self):
        lp = self.scalar_prior_sum()
        lp += -0.5 * (self.g_quad[0] + self.logdet_alpha + self.A * LOG_2PI)
        lp += -0.5 * (
            float(np.sum(self.g_quad[1:1 + self.n]))
            + self.n * (self.logdet_beta + self.B * LOG_2PI)
        )
        if self.spec.visit_effects and self.V:
            dims = (self.visit_start[1:] - self.visit_start[:-1]).sum()
            lp += -0.5 * (
                float(np.sum(self.g_quad[1 + self.n:])) + self.visit_logdet_sum + dims * LOG_2PI
            )
        return lp + self.loglik_cached()

    # -- hyperparameter proposals ----------------------------------------------

    def _parse_hyper_name(self, name):
        if name in ("sigma_v", "ell_v"):
            return "visit", name, None
        kind, side, which = name.split("_", 2)
        if kind == "sigma":
            return side, "sd", int(which[0]) - 1
        if kind == "ell":
            return side, "ell", int(which) - 1
        if kind == "R":
            return side, "corr", (int(which[0]) - 1, int(which[1]) - 1)
        raise KeyError(f"unknown hyperparameter {name!r}")

    def hyper_delta(self, changes):
        """Log-posterior delta for new hyperparameter values.

        ``changes`` maps head names (``"sigma_alpha_11"``, ``"ell_v"``, ...)
        to proposed values. Returns ``(delta, payload)``; ``payload`` is None
        (and delta ``-inf``) when the proposal leaves the support or a
        factorization fails.
        """
        st, spec, pc = self.state, self.spec, self.spec.priors
        new = {
            "alpha": [st.sd_alpha.copy(), st.ell_alpha.copy(), st.R_alpha.copy()],
            "beta": [st.sd_beta.copy(), st.ell_beta.copy(), st.R_beta.copy()],
            "visit": [st.sd_v, st.ell_v],
        }
        sides = set()
        delta_scalar = 0.0
        for name, value in changes.items():
            side, kind, idx = self._parse_hyper_name(name)
            sides.add(side)
            if side == "visit":
                if not spec.visit_effects:
                    raise KeyError(f"{name}: model has no visit effects")
                slot = 0 if kind == "sigma_v" else 1
                old = new["visit"][slot]
                if value <= 0:
                    return -math.inf, None
                if kind == "sigma_v":
                    delta_scalar += model.half_normal_logpdf(value, pc.sd_other_scale) \
                        - model.half_normal_logpdf(old, pc.sd_other_scale)
                else:
                    delta_scalar += model.inverse_gamma_logpdf(value, pc.ell_shape, pc.ell_scale) \
                        - model.inverse_gamma_logpdf(old, pc.ell_shape, pc.ell_scale)
                new["visit"][slot] = value
            elif kind == "sd":
                if value <= 0:
                    return -math.inf, None
                scales = [pc.sd_intercept_scale, pc.sd_other_scale, pc.sd_other_scale]
                old = new[side][0][idx]
                delta_scalar += model.half_normal_logpdf(value, scales[idx]) \
                    - model.half_normal_logpdf(old, scales[idx])
                new[side][0][idx] = value
            elif kind == "ell":
                if value <= 0:
                    return -math.inf, None
                old = new[side][1][idx]
                delta_scalar += model.inverse_gamma_logpdf(value, pc.ell_shape, pc.ell_scale) \
                    - model.inverse_gamma_logpdf(old, pc.ell_shape, pc.ell_scale)
                new[side][1][idx] = value
            else:  # corr entry
                p, q = idx
                if abs(value) >= 1.0:
                    return -math.inf, None
                corr = new[side][2]
                corr[p, q] = corr[q, p] = value
        for side in sides:
            if side in ("alpha", "beta") and any(
                self._parse_hyper_name(nm)[1] == "corr" for nm in changes
                if self._parse_hyper_name(nm)[0] == side
            ):
                corr = new[side][2]
                old_corr = st.R_alpha if side == "alpha" else st.R_beta
                new_term = model.correlation_prior_logdensity(corr)
                if not math.isfinite(new_term):
                    return -math.inf, None
                delta_scalar += new_term - model.correlation_prior_logdensity(old_corr)

        payload = {"changes": dict(changes), "sides": {}}
        delta = delta_scalar
        try:
            if "alpha" in sides:
                chol, logdet = self._assemble_side(*new["alpha"], self.Pa)
                r = self.theta[: self.A] - self.m_alpha
                w = solve_triangular(chol, r, lower=True, check_finite=False)
                quad = float(w @ w)
                delta += -0.5 * (quad + logdet) + 0.5 * (self.g_quad[0] + self.logdet_alpha)
                payload["sides"]["alpha"] = (new["alpha"], chol, logdet)
            if "beta" in sides:
                chol, logdet = self._assemble_side(*new["beta"], self.Pb)
                betas = self.theta[self.beta_off:self.gamma_off].reshape(self.n, self.B)
                w = solve_triangular(chol, betas.T, lower=True, check_finite=False)
                quad = float(np.sum(w * w))
                old_quad = float(np.sum(self.g_quad[1:1 + self.n]))
                delta += -0.5 * (quad + self.n * logdet) + 0.5 * (old_quad + self.n * self.logdet_beta)
                payload["sides"]["beta"] = (new["beta"], chol, logdet)
            if "visit" in sides:
                sd_v, ell_v = new["visit"]
                cov = self._visit_cov(sd_v, ell_v)
                quad = 0.0
                logdet_sum = 0.0
                gamma = self.theta[self.gamma_off:]
                for pid, pat in enumerate(self.patterns):
                    chol = np.linalg.cholesky(cov[np.ix_(pat, pat)])
                    gmat = gamma[self.pattern_gather[pid]]
                    w = solve_triangular(chol, gmat.T, lower=True, check_finite=False)
                    quad += float(np.sum(w * w))
                    logdet_sum += len(self.pattern_visits[pid]) * 2.0 * float(
                        np.sum(np.log(np.diag(chol)))
                    )
                old_quad = float(np.sum(self.g_quad[1 + self.n:]))
                delta += -0.5 * (quad + logdet_sum) + 0.5 * (old_quad + self.visit_logdet_sum)
                payload["sides"]["visit"] = (new["visit"],)
        except (np.linalg.LinAlgError, ValueError):
            return -math.inf, None
        return float(delta), payload

    def commit_hyper(self, payload):
        for side, stored in payload["sides"].items():
            if side == "alpha":
                (sd, ell, corr), _, _ = stored
                self._rebuild_alpha_side(sd, ell, corr)
            elif side == "beta":
                (sd, ell, corr), _, _ = stored
                self._rebuild_beta_side(sd, ell, corr)
            else:
                (sd_v, ell_v), = stored
                self._rebuild_visit_side(sd_v, ell_v)

    # -- global scalar proposals -----------------------------------------------

    def global_delta(self, name, value):
        st, spec, pc = self.state, self.spec, self.spec.priors
        if name == "mu0":
            prior = model.normal_logpdf(value, pc.mu0_mean, pc.mu0_sd) \
                - model.normal_logpdf(st.mu0, pc.mu0_mean, pc.mu0_sd)
            p, d = 0, value - st.mu0
        elif name == "mu1":
            prior = model.normal_logpdf(value, pc.mu1_mean, pc.mu1_sd) \
                - model.normal_logpdf(st.mu1, pc.mu1_mean, pc.mu1_sd)
            p, d = 1, value - st.mu1
        elif name == "mu_phi":
            prior = model.normal_logpdf(value, pc.mu_phi_mean, pc.mu_phi_sd) \
                - model.normal_logpdf(st.mu_phi, pc.mu_phi_mean, pc.mu_phi_sd)
            if spec.population_logsd:
                p, d = 2, value - st.mu_phi
            else:
                d = value - st.mu_phi
                r2w = float(np.sum(((self.data.y - self.mean) * self.inv_sd) ** 2))
                dll = -self.N * d - 0.5 * (math.exp(-2.0 * d) - 1.0) * r2w
                return prior + dll, ("lik", name, value, d)
        else:
            raise KeyError(f"unknown global {name!r}")
        uv = float(np.sum(self.v[: self.A][p::self.Pa]))
        dquad = -2.0 * d * uv + d * d * self.Bpp[p]
        return prior - 0.5 * dquad, ("mean", name, value, p, d, dquad)

    def commit_global(self, payload):
        kind = payload[0]
        if kind == "lik":
            _, name, value, d = payload
            self.state.mu_phi = value
            self.logsd += d
            self.inv_sd *= math.exp(-d)
        else:
            _, name, value, p, d, dquad = payload
            setattr(self.state, name, value)
            self.m_alpha[p::self.Pa] += d
            self.v[: self.A] -= d * self.Qu[p]
            self.g_quad[0] += dquad

    def posterior_delta(self, param_idx, deltas):
        """Log-posterior change if ``theta[param_idx] += deltas`` (pure query).

        Touches only the affected likelihood terms and prior quadratic
        forms, exactly as the sweep engine does; the workspace is not
        modified.
        """
        param_idx = np.asarray(param_idx, dtype=np.int64)
        deltas = np.asarray(deltas, dtype=float)
        dm, ds = {}, {}
        for p, d in zip(param_idx, deltas):
            for c in range(self.pm_ptr[p], self.pm_ptr[p + 1]):
                o = self.pm_obs[c]
                dm[o] = dm.get(o, 0.0) + self.pm_coef[c] * d
            for c in range(self.ps_ptr[p], self.ps_ptr[p + 1]):
                o = self.ps_obs[c]
                ds[o] = ds.get(o, 0.0) + d
        dll = 0.0
        for o in set(dm) | set(ds):
            r_old = self.data.y[o] - self.mean[o]
            lp_old = -self.logsd[o] - 0.5 * (r_old * self.inv_sd[o]) ** 2
            ls_new = self.logsd[o] + ds.get(o, 0.0)
            r_new = r_old - dm.get(o, 0.0)
            lp_new = -ls_new - 0.5 * (r_new * math.exp(-ls_new)) ** 2
            dll += lp_new - lp_old
        dq = 0.0
        for a, (pa, da) in enumerate(zip(param_idx, deltas)):
            g = self.pgroup[pa]
            m = self.g_dim[g]
            dq += 2.0 * da * self.v[self.g_voff[g] + self.pgidx[pa]]
            for pb, db in zip(param_idx, deltas):
                if self.pgroup[pb] == g:
                    dq += da * db * self.q_flat[
                        self.g_qoff[g] + self.pgidx[pa] * m + self.pgidx[pb]
                    ]
        return dll - 0.5 * dq

    # -- debug ------------------------------------------------------------------

    def check_consistency(self, atol=1e-6):
        """Verify all caches against full recomputation (debug mode)."""
        st = self.extract_state()
        mean, logsd = model._mean_and_logsd(st, self.data, self.spec)
        errs = {}
        errs["mean"] = float(np.max(np.abs(mean - self.mean))) if self.N else 0.0
        errs["logsd"] = float(np.max(np.abs(logsd - self.logsd))) if self.N else 0.0
        full = model.log_posterior(st, self.data, self.spec)
        cached = self.cached_log_posterior()
        errs["log_posterior"] = abs(full - cached) / max(1.0, abs(full))
        r = self.theta[: self.A] - self.m_alpha
        errs["v_alpha"] = float(np.max(np.abs(self._q_alpha @ r - self.v[: self.A])))
        if any(e > atol for e in errs.values()):
            raise AssertionError(f"workspace cache inconsistency: {errs}")
        return errs
