"""nahdyn: trajectory-ensemble dynamics of a molecule scattering off a metal.

A two-coordinate diatomic (bond length R, surface distance Z) couples to a
discretized metal band through a Newns-Anderson-style impurity Hamiltonian.
The discrete electronic states are mapped onto classical oscillator pairs,
initial conditions are drawn from phase-space (Wigner) distributions, and
observables are estimated over seed-reproducible trajectory ensembles.
"""

from importlib import resources

from .model import (
    BandDiscretization,
    GroundEnergyError,
    ModelError,
    ModelParameters,
    adiabatic_ground_energy,
    anion_potential,
    coupling_vk,
    discretize_band,
    fermi_occupation,
    gap,
    load_model,
    morse,
    neutral_potential,
    save_model,
)

__version__ = "0.1.0"


def default_model_path():
    """Path of the model file shipped with the package."""
    return resources.files("nahdyn").joinpath("data/no_au111.yaml")


def load_default_model() -> ModelParameters:
    return load_model(default_model_path())
