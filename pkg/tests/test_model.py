import math

import numpy as np
import pytest
import yaml

import nahdyn
from nahdyn.model import (
    ModelError,
    anion_potential,
    coupling_vk,
    discretize_band,
    fermi_occupation,
    gap,
    gap_gradient,
    load_model,
    morse,
    morse_deriv,
    neutral_gradient,
    neutral_potential,
    save_model,
)


def test_morse_basic_points():
    # minimum, dissociation limit, and the exp(-a r) = 1/2 point
    assert morse(0.0, 3.0, 2.0) == pytest.approx(-3.0, abs=1e-14)
    assert morse(1e3, 3.0, 2.0) == pytest.approx(0.0, abs=1e-12)
    r_half = math.log(2.0) / 2.0
    assert morse(r_half, 3.0, 2.0) == pytest.approx(-0.75 * 3.0, rel=1e-14)


def test_morse_deriv_matches_fd():
    rng = np.random.default_rng(0)
    r = rng.uniform(-0.5, 2.0, 40)
    h = 1e-6
    fd = (morse(r + h, 4.0, 2.3) - morse(r - h, 4.0, 2.3)) / (2 * h)
    assert np.allclose(morse_deriv(r, 4.0, 2.3), fd, rtol=1e-8, atol=1e-9)


def test_neutral_asymptote(params):
    # far from the surface, at the bond minimum: -D0 + c0
    v = neutral_potential(params.r0, 1e4, params)
    assert v == pytest.approx(-params.d0 + params.c0, abs=1e-12)


def test_neutral_repulsion_positive(params):
    rng = np.random.default_rng(1)
    r = rng.uniform(0.9, 2.4, 50)
    z = rng.uniform(0.0, 6.0, 50)
    base = morse(r - params.r0, params.d0, params.a0) + params.c0
    assert np.all(neutral_potential(r, z, params) - base > 0.0)


def test_neutral_gradient_z_fd(params):
    # analytic dU0/dZ vs central differences at (R0, Z0 + 1)
    z = params.z0 + 1.0
    h = 1e-5
    fd = (neutral_potential(params.r0, z + h, params)
          - neutral_potential(params.r0, z - h, params)) / (2 * h)
    analytic = neutral_gradient(params.r0, z, params)[1]
    assert analytic == pytest.approx(-params.b0
                                     * math.exp(-params.b0 * (z - params.z0)),
                                     rel=1e-12)
    assert analytic == pytest.approx(fd, rel=1e-6)


def test_anion_minimum(params):
    v = anion_potential(params.r1, params.z1, params)
    assert v == pytest.approx(-params.d1 - params.d2 + params.c1, abs=1e-12)


def test_gap_against_independent_evaluation(params):
    # second implementation straight from the diabat definitions
    def oracle(r, z, p):
        def vm(x, d, a):
            return d * (math.exp(-2 * a * x) - 2 * math.exp(-a * x))

        u0 = vm(r - p.r0, p.d0, p.a0) + math.exp(-p.b0 * (z - p.z0)) + p.c0
        u1 = vm(r - p.r1, p.d1, p.a1) + vm(z - p.z1, p.d2, p.a2) + p.c1
        return u1 - u0

    r = np.linspace(0.9, 2.4, 31)
    z = np.linspace(0.0, 5.0, 29)
    for zi in z:
        got = gap(r, zi, params)
        want = np.array([oracle(ri, zi, params) for ri in r])
        assert np.allclose(got, want, rtol=1e-12, atol=1e-13)


def test_gap_gradient_fd(params):
    rng = np.random.default_rng(2)
    h = 1e-6
    for _ in range(20):
        r = rng.uniform(0.9, 2.0)
        z = rng.uniform(0.5, 5.0)
        dr, dz = gap_gradient(r, z, params)
        fd_r = (gap(r + h, z, params) - gap(r - h, z, params)) / (2 * h)
        fd_z = (gap(r, z + h, params) - gap(r, z - h, params)) / (2 * h)
        assert dr == pytest.approx(fd_r, rel=1e-6, abs=1e-8)
        assert dz == pytest.approx(fd_z, rel=1e-6, abs=1e-8)


def test_band_midpoints(params):
    band = discretize_band(params.replace(n_bath=1, delta_e=7.0, mu=0.0))
    assert band.energies == pytest.approx([0.0])
    band = discretize_band(params.replace(n_bath=2, delta_e=7.0, mu=0.0))
    assert band.energies == pytest.approx([-1.75, 1.75])


def test_band_symmetry_and_bounds(params):
    band = discretize_band(params)
    eps = band.energies - params.mu
    assert np.allclose(eps, -eps[::-1], atol=1e-12)
    assert np.max(np.abs(eps)) <= params.delta_e / 2


def test_coupling_sum_rule(params):
    # sum V_k(Z)^2 = Gamma dE/(2 pi) (1 - tanh(Z/a))^2 at any Z and N
    for n in (1, 7, 100, 333):
        band = discretize_band(params, n=n)
        total = float(np.sum(band.coupling_scale ** 2))
        want = params.gamma * params.delta_e / (2 * math.pi)
        assert total == pytest.approx(want, rel=1e-12)
        for z in (0.0, 0.7, 2.5, 6.0):
            vk = coupling_vk(z, band, params)
            decay = 1 - math.tanh(z / params.a_tilde)
            assert float(np.sum(vk ** 2)) == pytest.approx(
                want * decay ** 2, rel=1e-12)


def test_coupling_limits(params):
    band = discretize_band(params)
    assert np.allclose(coupling_vk(0.0, band, params), band.coupling_scale,
                       rtol=1e-14)
    assert np.allclose(coupling_vk(1e3, band, params), 0.0, atol=1e-14)
    # 24.5/(2 pi) at the published coupling strength and band width
    p35 = params.replace(gamma=3.5, delta_e=7.0)
    band = discretize_band(p35)
    assert float(np.sum(coupling_vk(0.0, band, p35) ** 2)) == pytest.approx(
        24.5 / (2 * math.pi), rel=1e-12)


def test_band_rejects_bad_sizes(params):
    with pytest.raises(ModelError):
        discretize_band(params, n=0)
    with pytest.raises(ModelError):
        params.replace(delta_e=-1.0)


def test_fermi_conventions(params):
    eps = np.array([-1.0, 0.0, 1.0])
    std = fermi_occupation(eps, params)
    assert std[1] == pytest.approx(0.5)
    assert std[0] > 0.9 and std[2] < 0.1
    flipped = fermi_occupation(eps, params.replace(fermi_convention="inverted"))
    assert np.allclose(std, flipped[::-1], rtol=1e-12)


def test_potentials_finite_over_domain(params):
    from nahdyn.units import BOHR

    r = np.linspace(0.5 * BOHR, 10 * BOHR, 120)
    z = np.linspace(0.0, 12.0, 60)
    for zi in z:
        for f in (neutral_potential, anion_potential, gap):
            assert np.all(np.isfinite(f(r, zi, params)))
        gr, gz = gap_gradient(r, zi, params)
        assert np.all(np.isfinite(gr)) and np.all(np.isfinite(gz))


def test_model_file_roundtrip(params, tmp_path):
    path = tmp_path / "model.yaml"
    save_model(params, path)
    back = load_model(path)
    assert back.d0 == pytest.approx(params.d0, rel=1e-12)
    assert back.mass_total == pytest.approx(params.mass_total, rel=1e-12)
    assert back.n_bath == params.n_bath
    assert back.fermi_convention == params.fermi_convention


def test_model_file_validation(tmp_path):
    good = yaml.safe_load(open(nahdyn.default_model_path()))

    def write(doc):
        path = tmp_path / "m.yaml"
        path.write_text(yaml.safe_dump(doc))
        return path

    doc = dict(good)
    del doc["band"]
    with pytest.raises(ModelError, match="band"):
        load_model(write(doc))

    doc = yaml.safe_load(open(nahdyn.default_model_path()))
    del doc["coupling"]["Gamma_eV"]
    with pytest.raises(ModelError, match="Gamma_eV"):
        load_model(write(doc))

    doc = yaml.safe_load(open(nahdyn.default_model_path()))
    doc["coupling"]["Gamma_eV"] = "strong"
    with pytest.raises(ModelError, match="number"):
        load_model(write(doc))

    doc = yaml.safe_load(open(nahdyn.default_model_path()))
    doc["extra_section"] = {}
    with pytest.raises(ModelError, match="unknown"):
        load_model(write(doc))

    doc = yaml.safe_load(open(nahdyn.default_model_path()))
    doc["morse_neutral"]["D0_eV"] = -1.0
    with pytest.raises(ModelError, match="d0"):
        load_model(write(doc))
