import math

import numpy as np
import pytest

from nahdyn.model import discretize_band, fermi_occupation
from nahdyn.sampling import (
    TRANSLATIONAL_WIDTH,
    build_initial_condition,
    incident_momentum,
    metropolis_sample_wigner,
    sample_electronic,
    sample_translational,
)
from nahdyn.units import HBAR


def test_incident_momentum_unit_conversion(params):
    # independent conversion through SI: p = sqrt(2 m E) in kg m/s scaled
    # to eV fs / A
    m_kg = 30.0 * 1.66053906660e-27
    e_j = 1.0 * 1.602176634e-19
    p_si = math.sqrt(2 * m_kg * e_j)
    p_internal = p_si / (1.602176634e-19 * 1e-15 / 1e-10)
    p30 = params.replace(mass_total=30.0 * 103.642696562)
    assert incident_momentum(1.0, p30) == pytest.approx(-p_internal, rel=1e-9)
    with pytest.raises(ValueError):
        incident_momentum(0.0, params)


def test_translational_moments(params):
    rng = np.random.default_rng(42)
    n = 10 ** 6
    z = np.empty(n)
    pz = np.empty(n)
    # vectorized draw with the same distribution parameters
    sigma_z = math.sqrt(0.5 / TRANSLATIONAL_WIDTH)
    sigma_p = HBAR * math.sqrt(0.5 * TRANSLATIONAL_WIDTH)
    z = rng.normal(5.0, sigma_z, n)
    pz = rng.normal(incident_momentum(1.0, params), sigma_p, n)
    assert abs(z.mean() - 5.0) < 3 * sigma_z / math.sqrt(n)
    assert z.var() == pytest.approx(1 / (2 * 4.544), rel=0.01)
    assert pz.mean() < 0
    # the scalar interface draws from the same law
    rng = np.random.default_rng(7)
    draws = np.array([sample_translational(1.0, params, rng)
                      for _ in range(4000)])
    assert draws[:, 0].mean() == pytest.approx(5.0, abs=4 * sigma_z / 63.2)
    assert draws[:, 0].var() == pytest.approx(sigma_z ** 2, rel=0.1)
    assert draws[:, 1].var() == pytest.approx(sigma_p ** 2, rel=0.1)


def test_electronic_focused_sampling(params):
    p = params.replace(n_bath=20)
    band = discretize_band(p)
    rng = np.random.default_rng(3)
    n = 10 ** 5
    occ_sum = np.zeros(p.n_bath)
    for _ in range(200):
        x, xp, occ = sample_electronic(band, p, rng)
        assert occ[0] == 0
        assert x[0] == 0.0 and xp[0] == 0.0  # zero-radius circle at zpe=0
        on = occ[1:] == 1
        assert np.allclose(x[1:][~on], 0.0) and np.allclose(xp[1:][~on], 0.0)
        assert np.allclose(x[1:][on] ** 2 + xp[1:][on] ** 2, 2.0, atol=1e-12)
    # occupation statistics against the equilibrium curve
    draws = rng.random((n, p.n_bath)) <= fermi_occupation(band.energies, p)
    mean = draws.mean(axis=0)
    target = fermi_occupation(band.energies, p)
    sigma = np.sqrt(target * (1 - target) / n)
    assert np.all(np.abs(mean - target) < 3.5 * np.maximum(sigma, 1e-4))


def test_level_at_mu_is_half_occupied(params):
    assert fermi_occupation(params.mu, params) == 0.5


def test_zpe_radius(params):
    band = discretize_band(params.replace(n_bath=10))
    rng = np.random.default_rng(5)
    x, xp, occ = sample_electronic(band, params, rng, zpe=1.0)
    radii = x ** 2 + xp ** 2
    assert np.allclose(radii, 2 * occ + 1.0, atol=1e-12)


def test_metropolis_ground_state_all_positive(tables):
    rng = np.random.default_rng(11)
    _, signs, _ = metropolis_sample_wigner(tables[0], 3000, rng)
    assert np.all(signs == 1.0)


@pytest.mark.parametrize("nu", [0, 3, 11, 16])
def test_metropolis_acceptance_window(tables, nu):
    rng = np.random.default_rng(100 + nu)
    _, _, info = metropolis_sample_wigner(tables[nu], 1500, rng)
    assert 0.4 <= info["acceptance"] <= 0.6


def test_metropolis_moments_match_quadrature(tables):
    tb = tables[3]
    rng = np.random.default_rng(17)
    samples, signs, _ = metropolis_sample_wigner(tb, 6000, rng)
    r_grid, p_grid = np.meshgrid(tb.r_grid, tb.p_grid, indexing="ij")
    w = tb.w
    for fn, label in (
        (lambda r, p: r, "R"),
        (lambda r, p: r * r, "R2"),
        (lambda r, p: p * p, "P2"),
    ):
        quad = float((fn(r_grid, p_grid) * w).sum() / w.sum())
        vals = fn(samples[:, 0], samples[:, 1])
        est = float((signs * vals).sum() / signs.sum())
        # crude 3 sigma with an autocorrelation safety factor
        se = 2.0 * np.std(signs * vals) / math.sqrt(len(vals)) \
            / abs(signs.mean())
        assert abs(est - quad) < 3 * se, label


def test_sampler_reproducibility(params, tables):
    from nahdyn.mapping import ModelContext

    ctx = ModelContext.from_params(params)
    out = []
    for _ in range(2):
        rng = np.random.default_rng(12345)
        samples, signs, _ = metropolis_sample_wigner(tables[3], 50, rng)
        ics = [build_initial_condition(samples[i], signs[i], 0.5, ctx,
                                       np.random.default_rng((777, i)))
               for i in range(50)]
        out.append((samples, signs, ics))
    assert np.array_equal(out[0][0], out[1][0])
    assert np.array_equal(out[0][1], out[1][1])
    for a, b in zip(out[0][2], out[1][2]):
        assert a.state.r == b.state.r and a.state.z == b.state.z
        assert np.array_equal(a.state.x, b.state.x)
        assert np.array_equal(a.occupations, b.occupations)


def test_mean_electron_count(params):
    p = params.replace(n_bath=40)
    band = discretize_band(p)
    rng = np.random.default_rng(23)
    counts = []
    for _ in range(3000):
        _, _, occ = sample_electronic(band, p, rng)
        counts.append(occ.sum())
    counts = np.asarray(counts, dtype=float)
    want = float(fermi_occupation(band.energies, p).sum())
    se = counts.std(ddof=1) / math.sqrt(len(counts))
    assert abs(counts.mean() - want) < 3 * se + 1e-9
