"""Compiled inner loops for the grid backups.

Both kernels interpolate bilinearly in ``(p_x^r, v_r)`` on arrays that were
already shifted along the lateral axes, which is exact for the separable
joint model: the successor of ``(p, v)`` is ``(p + v dt, v + dv)``.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _cell(t, n):
    if t < 0.0:
        t = 0.0
    elif t > n - 1.0:
        t = n - 1.0
    i = int(np.floor(t))
    if i > n - 2:
        i = n - 2
    return i, t - i


@njit(cache=True)
def minmax_backup(lat, lat_index, dv, px, vr, dt, best, arg):
    """``best = max_r min_h V(f(x, r, h))`` with first-index argmax in ``arg``.

    ``lat[lat_index[r, h]]`` is the value array already shifted laterally
    for the pair ``(r, h)`` and ``dv[r, h]`` the change of ``v_r``.
    """
    NP, NV, NY, NH = best.shape
    nR, nU = lat_index.shape
    x0, hx = px[0], px[1] - px[0]
    v0, hv = vr[0], vr[1] - vr[0]
    worst = np.empty((NY, NH))
    for ip in range(NP):
        for iv in range(NV):
            jx, wx = _cell((px[ip] + vr[iv] * dt - x0) / hx, NP)
            for a in range(NY):
                for b in range(NH):
                    best[ip, iv, a, b] = -np.inf
            for r in range(nR):
                worst[:, :] = np.inf
                for h in range(nU):
                    jv, wv = _cell((vr[iv] + dv[r, h] - v0) / hv, NV)
                    L = lat[lat_index[r, h]]
                    c00 = (1.0 - wx) * (1.0 - wv)
                    c01 = (1.0 - wx) * wv
                    c10 = wx * (1.0 - wv)
                    c11 = wx * wv
                    for a in range(NY):
                        for b in range(NH):
                            val = (c00 * L[jx, jv, a, b] + c01 * L[jx, jv + 1, a, b]
                                   + c10 * L[jx + 1, jv, a, b] + c11 * L[jx + 1, jv + 1, a, b])
                            if val < worst[a, b]:
                                worst[a, b] = val
                for a in range(NY):
                    for b in range(NH):
                        if worst[a, b] > best[ip, iv, a, b]:
                            best[ip, iv, a, b] = worst[a, b]
                            arg[ip, iv, a, b] = r
    return best, arg


@njit(cache=True)
def expect_shift(lat, weights, dv, px, vr, dt, out):
    """``out = sum_h weights[h] * lat[h](p + v dt, v + dv[h])``.

    ``lat`` has shape (nH, ..., NP, NV, NY, NH) flattened to
    (nH, M, NP, NV, NY, NH) and ``weights`` (nH, M, NY, NH) so that the
    human-action weights may depend on the lateral state and on a leading
    hypothesis axis ``M``.
    """
    nU, M, NP, NV, NY, NH = lat.shape
    x0, hx = px[0], px[1] - px[0]
    v0, hv = vr[0], vr[1] - vr[0]
    for m in range(M):
        for ip in range(NP):
            for iv in range(NV):
                jx, wx = _cell((px[ip] + vr[iv] * dt - x0) / hx, NP)
                for a in range(NY):
                    for b in range(NH):
                        out[m, ip, iv, a, b] = 0.0
                for h in range(nU):
                    jv, wv = _cell((vr[iv] + dv[h] - v0) / hv, NV)
                    c00 = (1.0 - wx) * (1.0 - wv)
                    c01 = (1.0 - wx) * wv
                    c10 = wx * (1.0 - wv)
                    c11 = wx * wv
                    for a in range(NY):
                        for b in range(NH):
                            val = (c00 * lat[h, m, jx, jv, a, b] + c01 * lat[h, m, jx, jv + 1, a, b]
                                   + c10 * lat[h, m, jx + 1, jv, a, b]
                                   + c11 * lat[h, m, jx + 1, jv + 1, a, b])
                            out[m, ip, iv, a, b] += weights[h, m, a, b] * val
    return out


@njit(cache=True)
def interp4(values, lows, spacing, counts, pts, out):
    """Clamped multilinear interpolation of ``values`` (L, n0, n1, n2, n3) at ``pts`` (P, 4)."""
    L = values.shape[0]
    n0, n1, n2, n3 = counts[0], counts[1], counts[2], counts[3]
    for p in range(pts.shape[0]):
        i0, w0 = _cell((pts[p, 0] - lows[0]) / spacing[0], n0)
        i1, w1 = _cell((pts[p, 1] - lows[1]) / spacing[1], n1)
        i2, w2 = _cell((pts[p, 2] - lows[2]) / spacing[2], n2)
        i3, w3 = _cell((pts[p, 3] - lows[3]) / spacing[3], n3)
        for l in range(L):
            acc = 0.0
            for a in range(2):
                wa = w0 if a else 1.0 - w0
                for b in range(2):
                    wb = wa * (w1 if b else 1.0 - w1)
                    for c in range(2):
                        wc = wb * (w2 if c else 1.0 - w2)
                        v0 = values[l, i0 + a, i1 + b, i2 + c, i3]
                        v1 = values[l, i0 + a, i1 + b, i2 + c, i3 + 1]
                        acc += wc * ((1.0 - w3) * v0 + w3 * v1)
            out[l, p] = acc
    return out


@njit(cache=True, inline="always")
def _interp_point(values, lows, spacing, counts, p, out):
    """All ``L`` layers of ``values`` (L, n0..n3) at one point ``p``."""
    i0, w0 = _cell((p[0] - lows[0]) / spacing[0], counts[0])
    i1, w1 = _cell((p[1] - lows[1]) / spacing[1], counts[1])
    i2, w2 = _cell((p[2] - lows[2]) / spacing[2], counts[2])
    i3, w3 = _cell((p[3] - lows[3]) / spacing[3], counts[3])
    for l in range(values.shape[0]):
        acc = 0.0
        for a in range(2):
            wa = w0 if a else 1.0 - w0
            for b in range(2):
                wb = wa * (w1 if b else 1.0 - w1)
                for c in range(2):
                    wc = wb * (w2 if c else 1.0 - w2)
                    v0 = values[l, i0 + a, i1 + b, i2 + c, i3]
                    v1 = values[l, i0 + a, i1 + b, i2 + c, i3 + 1]
                    acc += wc * ((1.0 - w3) * v0 + w3 * v1)
        out[l] = acc


@njit(cache=True)
def tree_step(x, b, vH, forced, qv, qlows, qspacing, qcounts, T, cv, clows, cspacing, ccounts,
              margin, uR, uH, dt, betas, thetas, basis_p, cost_p, eff_shield, tree_shield,
              r_idx, shielded, h_idx, Pbar, xn, vn, bn):
    """One scenario-tree step for a batch of nodes.

    Robot: QMDP surrogate argmin (shield-substituted objective when
    ``eff_shield``), then the shield filter when ``tree_shield``. Human: most
    likely lattice action under the belief mixture unless ``forced >= 0``.
    ``basis_p`` is (lane0, lane1, cruise, w_lane, w_speed, w_effort, dt) and
    ``cost_p`` (w_lat, w_speed, w_u, target, vr_ref, pass_distance, pass_lane)
    with a NaN pass distance meaning no lane switch.
    """
    n = x.shape[0]
    nh = b.shape[1]
    nR = uR.shape[0]
    nU = uH.shape[0]
    lik = np.empty((nh, nU))
    q = np.empty(nU)
    av = np.empty(nR)
    raw = np.empty(nR)
    wts = np.empty((nU, nh))
    vals = np.empty(nh)
    cvals = np.empty(1)
    s = np.empty(4)
    need_cert = eff_shield or tree_shield
    lane0, lane1, vc, wl, ws, we, bdt = (basis_p[0], basis_p[1], basis_p[2], basis_p[3],
                                         basis_p[4], basis_p[5], basis_p[6])
    for p in range(n):
        y = x[p, 3]
        v = vH[p]
        # Boltzmann likelihoods P(u | h)
        for h in range(nh):
            qmin = np.inf
            for u in range(nU):
                vl = uH[u, 0]
                a = uH[u, 1]
                q1 = (wl * (y + vl * bdt - lane0) ** 2 + ws * (v + a * bdt - vc) ** 2
                      + we * (vl * vl + a * a))
                q2 = (wl * (y + vl * bdt - lane1) ** 2 + ws * (v + a * bdt - vc) ** 2
                      + we * (vl * vl + a * a))
                q[u] = betas[h] * (thetas[h] * q1 + (1.0 - thetas[h]) * q2)
                if q[u] < qmin:
                    qmin = q[u]
            tot = 0.0
            for u in range(nU):
                lik[h, u] = np.exp(-(q[u] - qmin))
                tot += lik[h, u]
            for u in range(nU):
                lik[h, u] /= tot
        # certificate action values
        safe = 0
        outside = False
        if need_cert:
            _interp_point(cv, clows, cspacing, ccounts, x[p], cvals)
            outside = cvals[0] < margin
            best = -np.inf
            for r in range(nR):
                worst = np.inf
                for u in range(nU):
                    s[0] = x[p, 0] + x[p, 1] * dt
                    s[1] = x[p, 1] + (uH[u, 1] - uR[r, 1]) * dt
                    s[2] = x[p, 2] + uR[r, 0] * dt
                    s[3] = x[p, 3] + uH[u, 0] * dt
                    _interp_point(cv, clows, cspacing, ccounts, s, cvals)
                    if cvals[0] < worst:
                        worst = cvals[0]
                av[r] = worst
                if worst > best:
                    best = worst
                    safe = r
        # surrogate objective: stage cost + sum_h' w[u, h'] V(f, h')
        for u in range(nU):
            for k in range(nh):
                acc = 0.0
                for h in range(nh):
                    acc += b[p, h] * lik[h, u] * T[h, k]
                wts[u, k] = acc
        lane = cost_p[3]
        if not np.isnan(cost_p[5]) and x[p, 0] < -cost_p[5]:
            lane = cost_p[6]
        state_cost = (cost_p[0] * (x[p, 2] - lane) ** 2 + cost_p[1] * (x[p, 1] - cost_p[4]) ** 2)
        for r in range(nR):
            acc = state_cost + cost_p[2] * (uR[r, 0] ** 2 + uR[r, 1] ** 2)
            for u in range(nU):
                s[0] = x[p, 0] + x[p, 1] * dt
                s[1] = x[p, 1] + (uH[u, 1] - uR[r, 1]) * dt
                s[2] = x[p, 2] + uR[r, 0] * dt
                s[3] = x[p, 3] + uH[u, 0] * dt
                _interp_point(qv, qlows, qspacing, qcounts, s, vals)
                for k in range(nh):
                    acc += wts[u, k] * vals[k]
            raw[r] = acc
        choice = 0
        best = np.inf
        for r in range(nR):
            e = r
            if eff_shield and (outside or av[r] < margin):
                e = safe
            if raw[e] < best:
                best = raw[e]
                choice = r
        sh = False
        if tree_shield and av[choice] < margin:
            choice = safe
            sh = True
        r_idx[p] = choice
        shielded[p] = sh
        # human action and successor
        if forced[p] >= 0:
            hi = forced[p]
        else:
            hi = 0
            mbest = -np.inf
            for u in range(nU):
                m = 0.0
                for h in range(nh):
                    m += b[p, h] * lik[h, u]
                if m > mbest:
                    mbest = m
                    hi = u
        m = 0.0
        for h in range(nh):
            m += b[p, h] * lik[h, hi]
        h_idx[p] = hi
        Pbar[p] = m
        xn[p, 0] = x[p, 0] + x[p, 1] * dt
        xn[p, 1] = x[p, 1] + (uH[hi, 1] - uR[choice, 1]) * dt
        xn[p, 2] = x[p, 2] + uR[choice, 0] * dt
        xn[p, 3] = x[p, 3] + uH[hi, 0] * dt
        vn[p] = max(v + uH[hi, 1] * dt, 0.0)
        # Bayes update in log space, then the transition
        lmax = -np.inf
        post = np.empty(nh)
        for h in range(nh):
            if b[p, h] > 0.0 and lik[h, hi] > 0.0:
                post[h] = np.log(b[p, h]) + np.log(lik[h, hi])
            else:
                post[h] = -np.inf
            if post[h] > lmax:
                lmax = post[h]
        tot = 0.0
        for h in range(nh):
            post[h] = np.exp(post[h] - lmax) if lmax > -np.inf else b[p, h]
            tot += post[h]
        for h in range(nh):
            post[h] /= tot
        tot = 0.0
        for k in range(nh):
            acc = 0.0
            for h in range(nh):
                acc += post[h] * T[h, k]
            bn[p, k] = acc
            tot += acc
        for k in range(nh):
            bn[p, k] /= tot
