import time

import numpy as np
import pytest

from conftest import random_focused_state
from nahdyn.mapping import (
    MappedState,
    ModelContext,
    batch_energy,
    build_potential_matrix,
    electron_count,
    forces,
    total_energy,
)
from nahdyn.model import discretize_band
from nahdyn.units import HBAR


def mapped_oracle_energy(state, pm, params, zpe):
    """Plain (unsymmetrized) mapped Hamiltonian, assembled densely."""
    v = pm.dense()
    kin = state.pr ** 2 / (2 * params.mass_reduced) \
        + state.pz ** 2 / (2 * params.mass_total)
    quad = 0.5 * (state.x @ v @ state.x + state.p @ v @ state.p
                  - zpe * np.trace(v))
    return kin + pm.u0 + quad


def test_matrix_shape_and_trace(small_params):
    p = small_params.replace(n_bath=2)
    band = discretize_band(p)
    pm = build_potential_matrix(1.2, 2.0, p, band, n_electrons=1)
    dense = pm.dense()
    assert dense.shape == (3, 3)
    off = dense - np.diag(np.diag(dense))
    assert np.count_nonzero(off) == 4  # symmetric pair per metal level
    # mu-symmetric band: trace = gap alone
    assert pm.trace == pytest.approx(pm.h, abs=1e-12)
    assert abs(np.trace(pm.dense_traceless())) <= 1e-12 * max(abs(pm.trace), 1)


def test_couplings_vanish_far_away(small_params):
    band = discretize_band(small_params)
    pm = build_potential_matrix(1.15, 500.0, small_params, band, 10)
    assert np.all(np.abs(pm.vk) < 1e-200)


def test_arrowhead_matvec_matches_dense(small_params):
    band = discretize_band(small_params)
    pm = build_potential_matrix(1.25, 1.4, small_params, band, 11)
    rng = np.random.default_rng(3)
    for _ in range(5):
        v = rng.standard_normal(small_params.n_bath + 1)
        assert np.allclose(pm.traceless_matvec(v), pm.dense_traceless() @ v,
                           rtol=1e-12, atol=1e-12)


def test_energy_zero_mapping_variables(small_params, small_ctx):
    band = small_ctx.band
    n = small_params.n_bath
    st = MappedState(1.2, 2.5, 3.0, -40.0, np.zeros(n + 1), np.zeros(n + 1),
                     n_electrons=0)
    pm = build_potential_matrix(st.r, st.z, small_params, band, 0)
    kin = st.pr ** 2 / (2 * small_params.mass_reduced) \
        + st.pz ** 2 / (2 * small_params.mass_total)
    assert total_energy(st, pm, small_params) == pytest.approx(
        kin + pm.u_tilde, rel=1e-14)


def test_electronic_term_is_quadratic(small_params, small_ctx):
    rng = np.random.default_rng(5)
    st = random_focused_state(small_ctx, rng)
    pm = build_potential_matrix(st.r, st.z, small_params, small_ctx.band,
                                st.n_electrons)
    kin_plus_u = total_energy(
        MappedState(st.r, st.z, st.pr, st.pz, 0 * st.x, 0 * st.p,
                    st.n_electrons), pm, small_params)
    e1 = total_energy(st, pm, small_params) - kin_plus_u
    doubled = MappedState(st.r, st.z, st.pr, st.pz, 2 * st.x, 2 * st.p,
                          st.n_electrons)
    e2 = total_energy(doubled, pm, small_params) - kin_plus_u
    assert e2 == pytest.approx(4 * e1, rel=1e-12)


def test_symmetrized_equals_plain_mapping(small_params, small_ctx):
    # identity holds whenever sum((x^2+p^2-zpe))/2 equals the electron count
    rng = np.random.default_rng(7)
    n = small_params.n_bath
    for zpe in (0.0, 1.0):
        for _ in range(50):
            occ = np.zeros(n + 1)
            occ[1:] = rng.random(n) < 0.5
            theta = rng.uniform(0, 2 * np.pi, n + 1)
            radius = np.sqrt(2 * occ + zpe)
            st = MappedState(rng.uniform(1.0, 1.6), rng.uniform(1.0, 4.0),
                             rng.normal(scale=10), rng.normal(scale=40),
                             radius * np.cos(theta), radius * np.sin(theta),
                             n_electrons=int(occ.sum()))
            assert electron_count(st.x, st.p, zpe) == pytest.approx(
                st.n_electrons, abs=1e-9)
            pm = build_potential_matrix(st.r, st.z, small_params,
                                        small_ctx.band, st.n_electrons)
            h_sym = total_energy(st, pm, small_params)
            h_map = mapped_oracle_energy(st, pm, small_params, zpe)
            assert h_sym == pytest.approx(h_map, rel=1e-12)


def test_forces_match_finite_differences(small_params, small_ctx):
    rng = np.random.default_rng(11)
    band = small_ctx.band
    h = 1e-6

    def energy(st):
        pm = build_potential_matrix(st.r, st.z, small_params, band,
                                    st.n_electrons)
        return total_energy(st, pm, small_params)

    for _ in range(50):
        st = random_focused_state(small_ctx, rng)
        pm = build_potential_matrix(st.r, st.z, small_params, band,
                                    st.n_electrons)
        f_r, f_z, dx, dp = forces(st, pm, small_params, band)

        for attr, got in (("r", f_r), ("z", f_z)):
            plus = st.copy()
            minus = st.copy()
            setattr(plus, attr, getattr(st, attr) + h)
            setattr(minus, attr, getattr(st, attr) - h)
            fd = -(energy(plus) - energy(minus)) / (2 * h)
            assert got == pytest.approx(fd, rel=1e-5, abs=1e-7)

        # electronic rates carry 1/hbar: dx/dt = dH/dp / hbar, etc.
        k = rng.integers(0, small_params.n_bath + 1)
        plus, minus = st.copy(), st.copy()
        plus.p = st.p.copy()
        minus.p = st.p.copy()
        plus.p[k] += h
        minus.p[k] -= h
        fd = (energy(plus) - energy(minus)) / (2 * h) / HBAR
        assert dx[k] == pytest.approx(fd, rel=1e-5, abs=1e-7)
        plus, minus = st.copy(), st.copy()
        plus.x = st.x.copy()
        minus.x = st.x.copy()
        plus.x[k] += h
        minus.x[k] -= h
        fd = -(energy(plus) - energy(minus)) / (2 * h) / HBAR
        assert dp[k] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_occupation_rate_vanishes(small_params, small_ctx):
    # d/dt sum(x^2+p^2)/2 = (x.V~p - p.V~x)/hbar = 0 for symmetric V~
    rng = np.random.default_rng(13)
    for _ in range(10):
        st = random_focused_state(small_ctx, rng)
        pm = build_potential_matrix(st.r, st.z, small_params, small_ctx.band,
                                    st.n_electrons)
        _, _, dx, dp = forces(st, pm, small_params, small_ctx.band)
        rate = float(st.x @ dx + st.p @ dp)
        assert abs(rate) < 1e-10


def test_decoupled_zero_mapping_force(small_params):
    # couplings off and mapping variables at the origin: the only electronic
    # force left is the trace share, with gradient = the gap gradient
    from nahdyn.model import gap_gradient, neutral_gradient

    p = small_params.replace(gamma=0.0)
    band = discretize_band(p)
    n = p.n_bath
    ne = 7
    st = MappedState(1.22, 1.7, 0.0, 0.0, np.zeros(n + 1), np.zeros(n + 1),
                     n_electrons=ne)
    pm = build_potential_matrix(st.r, st.z, p, band, ne)
    f_r, f_z, _, _ = forces(st, pm, p, band)
    du_r, du_z = neutral_gradient(st.r, st.z, p)
    dh_r, dh_z = gap_gradient(st.r, st.z, p)
    share = ne / (n + 1)
    assert f_r == pytest.approx(-(du_r + share * dh_r), rel=1e-12)
    assert f_z == pytest.approx(-(du_z + share * dh_z), rel=1e-12)


def test_batch_energy_matches_scalar(small_params, small_ctx):
    rng = np.random.default_rng(17)
    states = [random_focused_state(small_ctx, rng) for _ in range(6)]
    r = np.array([s.r for s in states])
    z = np.array([s.z for s in states])
    pr = np.array([s.pr for s in states])
    pz = np.array([s.pz for s in states])
    x = np.vstack([s.x for s in states])
    p = np.vstack([s.p for s in states])
    ne = np.array([float(s.n_electrons) for s in states])
    batch = batch_energy(r, z, pr, pz, x, p, ne, small_ctx)
    for i, st in enumerate(states):
        pm = build_potential_matrix(st.r, st.z, small_params, small_ctx.band,
                                    st.n_electrons)
        assert batch[i] == pytest.approx(total_energy(st, pm, small_params),
                                         rel=1e-12)


def test_matvec_scales_linearly(params):
    # arrowhead product must not hide an O(N^2) dense build; generous wall
    # clock bounds keep this robust on slow machines while still ruling out
    # quadratic behavior (which would be ~50x between these sizes)
    rng = np.random.default_rng(19)
    times = {}
    for n in (2000, 16000):
        p = params.replace(n_bath=n)
        band = discretize_band(p)
        pm = build_potential_matrix(1.2, 1.5, p, band, n // 2)
        v = rng.standard_normal(n + 1)
        pm.traceless_matvec(v)  # warm
        t0 = time.perf_counter()
        for _ in range(50):
            pm.traceless_matvec(v)
        times[n] = time.perf_counter() - t0
    assert times[16000] < 30 * times[2000] + 0.05
