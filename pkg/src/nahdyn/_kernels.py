"""Compiled inner loop of the propagator.

Same step as the reference implementation in :mod:`nahdyn.propagate`
(kick/drift/rotate/drift/kick with Cayley electronic rotations), fused over a
chunk of steps for a whole batch so the per-step Python cost disappears.
Per-trajectory sums run sequentially over the level index, so results do not
depend on the batch composition.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def step_chunk(r, z, pr, pz, c, ne, f_r, f_z, init_forces,
               eps, vbar, sum_eps,
               d0, a0, r0, d1, a1, r1, d2, a2, z1, b0, z0, c0off, c1off,
               a_tilde, m_red, m_tot, hbar,
               dt, substeps, n_steps, r_lo, r_hi, bond_bad):
    nb, nlev = c.shape
    n = nlev - 1
    alpha = dt / substeps / (2.0 * hbar)
    half = 0.5 * dt
    invdk = np.empty(n, np.complex128)
    akd = np.empty(n, np.complex128)

    if init_forces:
        for b in range(nb):
            f_r[b], f_z[b] = _forces(r[b], z[b], c, b, ne[b],
                                     eps, vbar, sum_eps,
                                     d0, a0, r0, d1, a1, r1, d2, a2, z1,
                                     b0, z0, c0off, c1off, a_tilde)

    for _ in range(n_steps):
        for b in range(nb):
            prb = pr[b] + half * f_r[b]
            pzb = pz[b] + half * f_z[b]
            rb = r[b] + half * prb / m_red
            zb = z[b] + half * pzb / m_tot

            # level matrix pieces at the midpoint geometry
            h = _gap(rb, zb, d0, a0, r0, d1, a1, r1, d2, a2, z1,
                     b0, z0, c0off, c1off)
            g = 1.0 - math.tanh(zb / a_tilde)
            tshift = (h + sum_eps) / nlev

            # Cayley transform of the traceless arrowhead, O(N) solve:
            # c <- (1 + i a V~)^-1 (1 - i a V~) c  ~  exp(-i V~ dt / hbar) c
            d0c = 1.0 + 1j * alpha * (h - tshift)
            s2 = 0.0 + 0.0j
            for k in range(n):
                dkk = 1.0 + 1j * alpha * (eps[k] - tshift)
                ak = 1j * (alpha * g * vbar[k])
                inv = 1.0 / dkk
                invdk[k] = inv
                akdk = ak * inv
                akd[k] = akdk
                s2 += ak * akdk
            den0 = 1.0 / (d0c - s2)
            for _s in range(substeps):
                s1 = 0.0 + 0.0j
                for k in range(n):
                    s1 += akd[k] * c[b, k + 1]
                u0 = (c[b, 0] - s1) * den0
                for k in range(n):
                    ck = c[b, k + 1]
                    uk = ck * invdk[k] - akd[k] * u0
                    c[b, k + 1] = 2.0 * uk - ck
                c[b, 0] = 2.0 * u0 - c[b, 0]

            rb += half * prb / m_red
            zb += half * pzb / m_tot

            fr, fz = _forces(rb, zb, c, b, ne[b], eps, vbar, sum_eps,
                             d0, a0, r0, d1, a1, r1, d2, a2, z1,
                             b0, z0, c0off, c1off, a_tilde)
            f_r[b] = fr
            f_z[b] = fz
            pr[b] = prb + half * fr
            pz[b] = pzb + half * fz
            r[b] = rb
            z[b] = zb
            # not-inside test also catches NaN (both comparisons fail)
            if not (r_lo <= rb <= r_hi):
                bond_bad[b] = True


@njit(cache=True)
def _gap(rb, zb, d0, a0, r0, d1, a1, r1, d2, a2, z1, b0, z0, c0off, c1off):
    e0 = math.exp(-a0 * (rb - r0))
    e1 = math.exp(-a1 * (rb - r1))
    e2 = math.exp(-a2 * (zb - z1))
    u0 = d0 * (e0 * e0 - 2.0 * e0) + math.exp(-b0 * (zb - z0)) + c0off
    u1 = d1 * (e1 * e1 - 2.0 * e1) + d2 * (e2 * e2 - 2.0 * e2) + c1off
    return u1 - u0


@njit(cache=True)
def _forces(rb, zb, c, b, neb, eps, vbar, sum_eps,
            d0, a0, r0, d1, a1, r1, d2, a2, z1, b0, z0, c0off, c1off,
            a_tilde):
    nlev = c.shape[1]
    n = nlev - 1
    e0 = math.exp(-a0 * (rb - r0))
    e1 = math.exp(-a1 * (rb - r1))
    e2 = math.exp(-a2 * (zb - z1))
    erep = math.exp(-b0 * (zb - z0))
    du0_dr = 2.0 * a0 * d0 * (e0 - e0 * e0)
    du0_dz = -b0 * erep
    dh_dr = 2.0 * a1 * d1 * (e1 - e1 * e1) - du0_dr
    dh_dz = 2.0 * a2 * d2 * (e2 - e2 * e2) + b0 * erep
    sech = 1.0 / math.cosh(zb / a_tilde)
    dg_dz = -(sech * sech) / a_tilde

    x0 = c[b, 0].real
    p0 = c[b, 0].imag
    s = 0.5 * (x0 * x0 + p0 * p0)
    n0 = s
    cross = 0.0
    for k in range(n):
        xk = c[b, k + 1].real
        pk = c[b, k + 1].imag
        s += 0.5 * (xk * xk + pk * pk)
        cross += vbar[k] * (x0 * xk + p0 * pk)
    shift = n0 + (neb - s) / nlev
    fr = -du0_dr - dh_dr * shift
    fz = -du0_dz - dh_dz * shift - dg_dz * cross
    return fr, fz
