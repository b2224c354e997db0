import numpy as np
import pytest

import nahdyn
from nahdyn import dvr, wigner
from nahdyn.mapping import ModelContext


@pytest.fixture(scope="session")
def params():
    return nahdyn.load_default_model()


@pytest.fixture(scope="session")
def small_params(params):
    # light band for fast dynamics tests
    return params.replace(n_bath=24)


@pytest.fixture(scope="session")
def small_ctx(small_params):
    return ModelContext.from_params(small_params)


@pytest.fixture(scope="session")
def eigenstates(params):
    return dvr.morse_eigenstates(params, n_states=22)


@pytest.fixture(scope="session")
def tables(eigenstates):
    return {nu: wigner.build_wigner_table(eigenstates.psi[nu],
                                          eigenstates.r, nu)
            for nu in (0, 1, 3, 11, 16)}


def random_focused_state(ctx, rng, nu_occupied=None):
    """Mapped state with focused (zero-ZPE) electronic variables."""
    from nahdyn.mapping import MappedState
    from nahdyn.model import fermi_occupation

    n = ctx.band.n
    occ = np.zeros(n + 1)
    occ[1:] = rng.random(n) <= fermi_occupation(ctx.band.energies, ctx.params)
    theta = rng.uniform(0, 2 * np.pi, n + 1)
    radius = np.sqrt(2 * occ)
    return MappedState(
        r=rng.uniform(1.05, 1.35), z=rng.uniform(1.2, 4.0),
        pr=rng.normal(0, 15.0), pz=rng.normal(-50.0, 10.0),
        x=radius * np.cos(theta), p=radius * np.sin(theta),
        n_electrons=int(occ.sum()),
    )
