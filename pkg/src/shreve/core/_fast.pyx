# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sub-block sweep engine.

Operation-for-operation identical to ``_ref.sweep_blocks``; keep the two in
lock step so backends produce bit-identical chains.
"""
from libc.math cimport exp

import numpy as np

cimport numpy as cnp

cnp.import_array()

DEF MAXD = 16


def sweep_blocks(
    double[::1] theta, double[::1] v, double[::1] q_flat,
    long long[::1] g_voff, long long[::1] g_dim, long long[::1] g_qoff,
    long long[::1] pgroup, long long[::1] pgidx,
    long long[::1] pm_ptr, long long[::1] pm_obs, double[::1] pm_coef,
    long long[::1] ps_ptr, long long[::1] ps_obs,
    long long[::1] b_ptr, long long[::1] b_params, long long[::1] b_choloff,
    double[::1] prop_chol, double[::1] lam,
    double[::1] y, double[::1] mean, double[::1] logsd, double[::1] inv_sd,
    double[::1] g_quad,
    double[::1] z, double[::1] logu, unsigned char[::1] acc,
    long long[::1] w_count, double[::1] w_mean, double[::1] w_m2,
    double[::1] sc_dm, double[::1] sc_ds, long long[::1] sc_touch,
    unsigned char[::1] sc_flag,
):
    cdef Py_ssize_t n_blocks = b_ptr.shape[0] - 1
    cdef Py_ssize_t b, i, j, c, ti, uu, u
    cdef long long off, d, coff, p, pj, o, g, gi, m, qoff, qrow, voff, ntouch, n_ug, cnt
    cdef double s, di, dll, r_old, z_old, ds, ls_new, inv_new, r_new, z_new, dq_total, x
    cdef double delta[MAXD]
    cdef long long ug[MAXD]
    cdef double ug_dq[MAXD]
    cdef double d1[MAXD]
    cdef double d2[MAXD]
    cdef int n_accept = 0

    for b in range(n_blocks):
        off = b_ptr[b]
        d = b_ptr[b + 1] - off
        coff = b_choloff[b]

        for i in range(d):
            s = 0.0
            for j in range(i + 1):
                s += prop_chol[coff + i * d + j] * z[off + j]
            delta[i] = lam[b] * s

        ntouch = 0
        for i in range(d):
            p = b_params[off + i]
            di = delta[i]
            for c in range(pm_ptr[p], pm_ptr[p + 1]):
                o = pm_obs[c]
                if sc_flag[o] == 0:
                    sc_flag[o] = 1
                    sc_touch[ntouch] = o
                    ntouch += 1
                sc_dm[o] += pm_coef[c] * di
            for c in range(ps_ptr[p], ps_ptr[p + 1]):
                o = ps_obs[c]
                if sc_flag[o] == 0:
                    sc_flag[o] = 1
                    sc_touch[ntouch] = o
                    ntouch += 1
                sc_ds[o] += di

        dll = 0.0
        for ti in range(ntouch):
            o = sc_touch[ti]
            r_old = y[o] - mean[o]
            z_old = r_old * inv_sd[o]
            ds = sc_ds[o]
            if ds != 0.0:
                ls_new = logsd[o] + ds
                inv_new = exp(-ls_new)
            else:
                ls_new = logsd[o]
                inv_new = inv_sd[o]
            r_new = r_old - sc_dm[o]
            z_new = r_new * inv_new
            dll += (-ls_new - 0.5 * z_new * z_new) - (-logsd[o] - 0.5 * z_old * z_old)

        n_ug = 0
        for i in range(d):
            p = b_params[off + i]
            g = pgroup[p]
            gi = pgidx[p]
            u = -1
            for uu in range(n_ug):
                if ug[uu] == g:
                    u = uu
                    break
            if u < 0:
                u = n_ug
                ug[u] = g
                ug_dq[u] = 0.0
                n_ug += 1
            m = g_dim[g]
            qoff = g_qoff[g] + gi * m
            s = 2.0 * delta[i] * v[g_voff[g] + gi]
            for j in range(d):
                pj = b_params[off + j]
                if pgroup[pj] == g:
                    s += delta[i] * delta[j] * q_flat[qoff + pgidx[pj]]
            ug_dq[u] += s

        dq_total = 0.0
        for uu in range(n_ug):
            dq_total += ug_dq[uu]

        if logu[b] < dll - 0.5 * dq_total:
            acc[b] = 1
            n_accept += 1
            for i in range(d):
                p = b_params[off + i]
                di = delta[i]
                theta[p] += di
                for c in range(pm_ptr[p], pm_ptr[p + 1]):
                    mean[pm_obs[c]] += pm_coef[c] * di
                for c in range(ps_ptr[p], ps_ptr[p + 1]):
                    o = ps_obs[c]
                    logsd[o] += di
                    inv_sd[o] = exp(-logsd[o])
                g = pgroup[p]
                gi = pgidx[p]
                m = g_dim[g]
                qrow = g_qoff[g] + gi * m
                voff = g_voff[g]
                for j in range(m):
                    v[voff + j] += di * q_flat[qrow + j]
            for uu in range(n_ug):
                g_quad[ug[uu]] += ug_dq[uu]
        else:
            acc[b] = 0

        for ti in range(ntouch):
            o = sc_touch[ti]
            sc_dm[o] = 0.0
            sc_ds[o] = 0.0
            sc_flag[o] = 0

        cnt = w_count[b] + 1
        w_count[b] = cnt
        for i in range(d):
            x = theta[b_params[off + i]]
            d1[i] = x - w_mean[off + i]
            w_mean[off + i] += d1[i] / cnt
            d2[i] = x - w_mean[off + i]
        for i in range(d):
            for j in range(d):
                w_m2[coff + i * d + j] += d1[i] * d2[j]

    return n_accept
