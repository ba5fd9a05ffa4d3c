"""Pure-Python sub-block sweep engine (reference implementation).

Mirrors the compiled engine operation for operation, in the same order, so
the two backends produce bit-identical chains; keep any change here in lock
step with ``_fast.pyx``.
"""
import math

__all__ = ["sweep_blocks"]


def sweep_blocks(
    theta, v, q_flat, g_voff, g_dim, g_qoff,
    pgroup, pgidx,
    pm_ptr, pm_obs, pm_coef, ps_ptr, ps_obs,
    b_ptr, b_params, b_choloff,
    prop_chol, lam,
    y, mean, logsd, inv_sd, g_quad,
    z, logu, acc,
    w_count, w_mean, w_m2,
    sc_dm, sc_ds, sc_touch, sc_flag,
):
    """Random-walk Metropolis over every sub-block of one family.

    Proposes ``delta = lam[b] * L_b z_b`` for each block, evaluates the
    posterior delta from the observation caches and the Gaussian-prior
    quadratic-form caches, accepts or rejects with the pre-drawn
    ``logu[b]``, and updates the running per-block mean/covariance used for
    proposal adaptation. Mutates ``theta``, the caches, the Welford arrays,
    and ``acc`` in place; returns the number of accepted blocks.
    """
    n_blocks = len(b_ptr) - 1
    n_accept = 0
    delta = [0.0] * 16
    ug = [0] * 16
    ug_dq = [0.0] * 16
    d1 = [0.0] * 16
    d2 = [0.0] * 16

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
                inv_new = math.exp(-ls_new)
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
                    inv_sd[o] = math.exp(-logsd[o])
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
