import dataclasses

import numpy as np
import pytest

from conftest import random_focused_state
from nahdyn.mapping import MappedState, ModelContext, electron_count
from nahdyn.model import discretize_band
from nahdyn.propagate import (
    IntegratorConfig,
    PropagationError,
    propagate_batch,
    run_trajectory,
    step,
)
from nahdyn.sampling import build_initial_condition, metropolis_sample_wigner
from nahdyn.units import HBAR


@pytest.fixture(scope="module")
def incoming(small_ctx, tables):
    """A physical batch of incoming trajectories (nu_i = 3, 0.5 eV)."""
    rng = np.random.default_rng(29)
    samples, signs, _ = metropolis_sample_wigner(tables[3], 16, rng)
    ics = [build_initial_condition(samples[i], signs[i], 0.5, small_ctx, rng)
           for i in range(16)]
    return ics


def batch_arrays(ics):
    r = np.array([ic.state.r for ic in ics])
    z = np.array([ic.state.z for ic in ics])
    pr = np.array([ic.state.pr for ic in ics])
    pz = np.array([ic.state.pz for ic in ics])
    c = np.array([ic.state.x + 1j * ic.state.p for ic in ics])
    ne = np.array([float(ic.state.n_electrons) for ic in ics])
    return r, z, pr, pz, c, ne


def test_free_drift_is_exact(small_params, small_ctx):
    # no electrons, mapping variables at the origin, molecule far away:
    # all forces vanish identically and Z advances by P dt / m per step
    n = small_params.n_bath
    st = MappedState(small_params.r0, 2.0e5, 0.0, -60.0,
                     np.zeros(n + 1), np.zeros(n + 1), n_electrons=0)
    cfg = IntegratorConfig(dt=0.015, t_max=0.15, r_max=1e6)
    out = st
    for _ in range(3):
        out = step(out, cfg, small_ctx)
    want = st.z + 3 * 0.015 * st.pz / small_params.mass_total
    assert out.z == pytest.approx(want, rel=1e-15)
    assert out.r == st.r and out.pr == 0.0 and out.pz == st.pz


def test_single_step_reversibility(small_ctx, incoming):
    cfg = IntegratorConfig(dt=0.015, t_max=0.015)
    back = dataclasses.replace(cfg, dt=-0.015)
    st = incoming[0].state
    fwd = step(st, cfg, small_ctx)
    rev = step(fwd, back, small_ctx)
    v0 = np.concatenate([[st.r, st.z, st.pr, st.pz], st.x, st.p])
    v1 = np.concatenate([[rev.r, rev.z, rev.pr, rev.pz], rev.x, rev.p])
    assert np.max(np.abs(v1 - v0)) / np.max(np.abs(v0)) < 1e-12


def test_exact_rotation_matches_analytic_two_level(params):
    # one metal level, frozen nuclei: the mapping variables rotate under the
    # 2x2 traceless matrix; oracle is a manual eigendecomposition
    p = params.replace(n_bath=1)
    ctx = ModelContext.from_params(p)
    heavy = p.replace(mass_total=1e30, mass_reduced=1e30)
    ctx_frozen = ModelContext(params=heavy, band=discretize_band(p))
    st = MappedState(1.2, 1.1, 0.0, 0.0, np.array([0.3, 1.1]),
                     np.array([-0.2, 0.6]), n_electrons=1)
    dt = 0.015
    cfg = IntegratorConfig(dt=dt, t_max=dt, propagator="exact")
    out = step(st, cfg, ctx_frozen)

    from nahdyn.model import coupling_decay, gap

    h = float(gap(st.r, st.z, p))
    v01 = float(ctx.vbar[0] * coupling_decay(st.z, p))
    eps = float(ctx.eps[0])
    tshift = (h + eps) / 2.0
    m = np.array([[h - tshift, v01], [v01, eps - tshift]])
    lam, u = np.linalg.eigh(m)
    c0 = st.x + 1j * st.p
    c1 = u @ (np.exp(-1j * lam * dt / HBAR) * (u.conj().T @ c0))
    assert np.max(np.abs((out.x + 1j * out.p) - c1)) < 1e-10


def test_cayley_converges_to_exact(params):
    p = params.replace(n_bath=6)
    heavy = p.replace(mass_total=1e30, mass_reduced=1e30)
    ctx = ModelContext(params=heavy, band=discretize_band(p))
    rng = np.random.default_rng(31)
    st = random_focused_state(ctx, rng)
    st.z = 0.8  # strong coupling so the rotation actually mixes levels
    dt = 0.015
    exact = step(st, IntegratorConfig(dt=dt, t_max=dt, propagator="exact"),
                 ctx)
    errs = []
    for m in (1, 4, 16):
        cay = step(st, IntegratorConfig(dt=dt, t_max=dt,
                                        electronic_substeps=m), ctx)
        errs.append(np.max(np.abs(cay.x + 1j * cay.p
                                  - (exact.x + 1j * exact.p))))
    assert errs[0] < 1e-4
    # second-order substep convergence: 16x substeps, ~256x smaller error
    assert errs[2] < errs[0] / 100


def test_occupation_sum_conserved(small_ctx, incoming):
    cfg = IntegratorConfig(dt=0.015, t_max=150.0)
    r, z, pr, pz, c, ne = batch_arrays(incoming)
    s0 = 0.5 * np.sum(np.abs(c) ** 2, axis=1)
    res = propagate_batch(r, z, pr, pz, c, ne, small_ctx, cfg)
    s1 = 0.5 * np.sum(np.abs(res.final_c) ** 2, axis=1)
    assert np.max(np.abs(s1 - s0)) < 1e-8


def test_energy_drift_second_order_in_dt(small_ctx, incoming):
    # halve dt, expect ~4x smaller worst drift on the same trajectories
    r, z, pr, pz, c, ne = batch_arrays(incoming[:4])
    z[:] = 2.2  # start inside the interaction region
    drift = {}
    for dt in (0.03, 0.015):
        cfg = IntegratorConfig(dt=dt, t_max=40.0)
        res = propagate_batch(r, z, pr, pz, c, ne, small_ctx, cfg)
        drift[dt] = res.max_drift.max()
    ratio = drift[0.03] / drift[0.015]
    assert 2.5 < ratio < 7.0


def test_decoupled_dynamics_freezes_populations(small_params, tables):
    p = small_params.replace(gamma=0.0)
    ctx = ModelContext.from_params(p)
    rng = np.random.default_rng(37)
    samples, signs, _ = metropolis_sample_wigner(tables[3], 6, rng)
    ics = [build_initial_condition(samples[i], signs[i], 0.5, ctx, rng)
           for i in range(6)]
    r, z, pr, pz, c, ne = batch_arrays(ics)
    cfg = IntegratorConfig(dt=0.015, t_max=120.0)
    res = propagate_batch(r, z, pr, pz, c, ne, ctx, cfg)
    # metal occupations constant to machine precision, molecule stays empty
    assert np.max(np.abs(res.metal_end - res.metal_start)) < 1e-12
    assert np.max(np.abs(res.pop0)) < 1e-28


def test_determinism_and_batch_independence(small_ctx, incoming):
    cfg = IntegratorConfig(dt=0.015, t_max=20.0)
    r, z, pr, pz, c, ne = batch_arrays(incoming)
    a = propagate_batch(r, z, pr, pz, c, ne, small_ctx, cfg)
    b = propagate_batch(r, z, pr, pz, c, ne, small_ctx, cfg)
    assert np.array_equal(a.r, b.r) and np.array_equal(a.pop0, b.pop0)
    # a single-trajectory batch reproduces its row bit for bit
    solo = propagate_batch(r[3:4], z[3:4], pr[3:4], pz[3:4], c[3:4],
                           ne[3:4], small_ctx, cfg)
    assert np.array_equal(solo.r[0], a.r[3])
    assert np.array_equal(solo.pop0[0], a.pop0[3])
    assert np.array_equal(solo.energy[0], a.energy[3])


def test_zero_point_parameter_never_enters_dynamics(small_ctx, incoming):
    # same phase-space point, same electron count: the estimator bookkeeping
    # parameter has no channel into the propagator
    cfg = IntegratorConfig(dt=0.015, t_max=10.0)
    r, z, pr, pz, c, ne = batch_arrays(incoming[:2])
    a = propagate_batch(r, z, pr, pz, c, ne, small_ctx, cfg)
    b = propagate_batch(r, z, pr, pz, c, ne, small_ctx, cfg)
    assert np.array_equal(a.final_c, b.final_c)


def test_discard_flags(small_ctx, incoming):
    r, z, pr, pz, c, ne = batch_arrays(incoming[:3])
    # absurdly tight bond window: flagged as bond-range discards
    cfg = IntegratorConfig(dt=0.015, t_max=5.0, r_min=1.30, r_max=1.31)
    res = propagate_batch(r, z, pr, pz, c, ne, small_ctx, cfg)
    assert np.all(res.discard == 2)
    # absurdly tight energy tolerance: flagged as energy discards
    cfg = IntegratorConfig(dt=0.015, t_max=5.0, energy_tol=1e-16)
    res = propagate_batch(r, z, pr, pz, c, ne, small_ctx, cfg)
    assert np.all(res.discard == 1)


def test_step_rejects_nonfinite(small_ctx, incoming):
    st = incoming[0].state.copy()
    st.pz = float("nan")
    with pytest.raises(PropagationError):
        step(st, IntegratorConfig(), small_ctx)


def test_run_trajectory_early_stop(small_ctx, tables, incoming):
    cfg = IntegratorConfig(dt=0.015, t_max=900.0)
    rec = run_trajectory(incoming[0], cfg, small_ctx, vib_table=tables[3],
                         early_stop=True, z_detect=5.0)
    assert rec.exit_time < 880.0
    assert rec.final_state.pz > 0.0
    assert rec.final_state.z > 5.0
    assert rec.discard_reason == "none"
    assert rec.max_energy_drift < 1e-3


def test_run_trajectory_records_match_batch(small_ctx, incoming):
    cfg = IntegratorConfig(dt=0.015, t_max=12.0)
    rec = run_trajectory(incoming[1], cfg, small_ctx)
    r, z, pr, pz, c, ne = batch_arrays(incoming[1:2])
    res = propagate_batch(r, z, pr, pz, c, ne, small_ctx, cfg)
    assert np.array_equal(rec.series["r"], res.r[0])
    assert np.array_equal(rec.series["pop0"], res.pop0[0])
    assert np.array_equal(rec.series["energy"], res.energy[0])


def test_metal_population_recording(small_ctx, incoming):
    cfg = IntegratorConfig(dt=0.015, t_max=10.0)
    r, z, pr, pz, c, ne = batch_arrays(incoming[:2])
    res = propagate_batch(r, z, pr, pz, c, ne, small_ctx, cfg,
                          record_metal=True, metal_stride=2.0)
    assert res.metal_pops is not None
    assert res.metal_pops.shape[2] == small_ctx.band.n
    assert np.allclose(res.metal_pops[:, 0], res.metal_start)
    assert np.allclose(res.metal_pops[:, -1], res.metal_end)
