"""Diabatic model of a diatomic molecule in front of a metal surface.

Two nuclear coordinates: the bond length R and the molecule-surface distance
Z (both in angstrom).  The neutral diabat is a bond Morse plus an exponential
surface repulsion; the anion diabat is a bond Morse plus a surface Morse well.
A single molecular level at the diabat gap couples to N discretized metal band
states through a coupling that decays with Z.

All numerical parameter values live in a YAML model file (see
``data/no_au111.yaml`` for the shipped defaults and the key schema); nothing
physical is hard-coded here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import yaml

from .units import AMU

__all__ = [
    "ModelError",
    "GroundEnergyError",
    "ModelParameters",
    "BandDiscretization",
    "load_model",
    "save_model",
    "morse",
    "morse_deriv",
    "neutral_potential",
    "anion_potential",
    "gap",
    "gap_gradient",
    "neutral_gradient",
    "coupling_decay",
    "coupling_decay_deriv",
    "coupling_vk",
    "discretize_band",
    "fermi_occupation",
    "arrowhead_matrix",
    "adiabatic_ground_energy",
]


class ModelError(ValueError):
    """Invalid model parameters or malformed model file."""


class GroundEnergyError(RuntimeError):
    """Eigensolver failure while evaluating the adiabatic ground-state energy."""

    def __init__(self, r, z, original):
        super().__init__(
            f"eigensolver failed at geometry R={r:.6f} A, Z={z:.6f} A: {original}"
        )
        self.r = r
        self.z = z


@dataclass(frozen=True)
class ModelParameters:
    """Full physical definition of the scattering model.

    Lengths in angstrom, energies in eV, masses in internal units
    (eV fs^2/A^2, i.e. amu values multiplied by :data:`nahdyn.units.AMU`).
    """

    # neutral bond Morse
    d0: float
    a0: float
    r0: float
    # anion bond Morse
    d1: float
    a1: float
    r1: float
    # anion-surface Morse well (Z direction)
    d2: float
    a2: float
    z1: float
    # neutral-surface exponential repulsion
    b0: float
    z0: float
    # diabat energy offsets
    c0: float
    c1: float
    # molecule-metal coupling
    gamma: float
    a_tilde: float
    # metal band
    delta_e: float
    n_bath: int
    mu: float
    beta: float
    # masses (internal units)
    mass_total: float
    mass_reduced: float
    # Fermi-function sign convention; "inverted" flips occupation about mu
    # (kept selectable for A/B checks, see model-file docs)
    fermi_convention: str = "standard"

    def __post_init__(self):
        positive = {
            "d0": self.d0, "a0": self.a0, "d1": self.d1, "a1": self.a1,
            "d2": self.d2, "a2": self.a2, "b0": self.b0, "a_tilde": self.a_tilde,
            "delta_e": self.delta_e, "beta": self.beta,
            "mass_total": self.mass_total, "mass_reduced": self.mass_reduced,
        }
        for name, value in positive.items():
            if not value > 0.0:
                raise ModelError(f"parameter {name} must be > 0, got {value}")
        if self.gamma < 0.0:
            raise ModelError(f"coupling strength must be >= 0, got {self.gamma}")
        if self.n_bath < 1:
            raise ModelError(f"band size must be >= 1, got {self.n_bath}")
        if self.fermi_convention not in ("standard", "inverted"):
            raise ModelError(
                f"fermi_convention must be 'standard' or 'inverted', "
                f"got {self.fermi_convention!r}"
            )

    @property
    def mass_total_amu(self):
        return self.mass_total / AMU

    @property
    def mass_reduced_amu(self):
        return self.mass_reduced / AMU

    def replace(self, **changes) -> "ModelParameters":
        from dataclasses import replace

        return replace(self, **changes)


# mapping: YAML section -> {yaml key: dataclass field}
_SCHEMA = {
    "morse_neutral": {"D0_eV": "d0", "a0_inv_A": "a0", "R0_A": "r0"},
    "morse_anion": {"D1_eV": "d1", "a1_inv_A": "a1", "R1_A": "r1"},
    "anion_surface": {"D2_eV": "d2", "a2_inv_A": "a2", "Z1_A": "z1"},
    "repulsion": {"b0_inv_A": "b0", "Z0_A": "z0"},
    "offsets": {"c0_eV": "c0", "c1_eV": "c1"},
    "coupling": {"Gamma_eV": "gamma", "a_tilde_A": "a_tilde"},
    "band": {"DeltaE_eV": "delta_e", "N": "n_bath", "mu_eV": "mu",
             "beta_inv_eV": "beta"},
    "masses": {"m_total_amu": "mass_total", "m_reduced_amu": "mass_reduced"},
}


def load_model(path) -> ModelParameters:
    """Load and validate a model YAML file."""
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ModelError(f"model file {path} does not contain a mapping")
    fields = {}
    for section, keys in _SCHEMA.items():
        if section not in raw:
            raise ModelError(f"model file {path} is missing section '{section}'")
        block = raw[section]
        if not isinstance(block, dict):
            raise ModelError(f"section '{section}' must be a mapping")
        for key, field in keys.items():
            if key not in block:
                raise ModelError(f"section '{section}' is missing key '{key}'")
            value = block[key]
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ModelError(f"{section}.{key} must be a number, got {value!r}")
            fields[field] = value
        unknown = set(block) - set(keys)
        if unknown:
            raise ModelError(
                f"section '{section}' has unknown keys {sorted(unknown)}"
            )
    fields["n_bath"] = int(round(fields["n_bath"]))
    # masses are stated in amu in the file, converted once here
    fields["mass_total"] *= AMU
    fields["mass_reduced"] *= AMU
    fields["fermi_convention"] = raw.get("fermi_convention", "standard")
    known = set(_SCHEMA) | {"fermi_convention"}
    unknown = set(raw) - known
    if unknown:
        raise ModelError(f"model file has unknown top-level keys {sorted(unknown)}")
    return ModelParameters(**fields)


def save_model(p: ModelParameters, path):
    """Write a model back out in the same YAML schema `load_model` reads."""
    doc = {}
    values = {
        "d0": p.d0, "a0": p.a0, "r0": p.r0,
        "d1": p.d1, "a1": p.a1, "r1": p.r1,
        "d2": p.d2, "a2": p.a2, "z1": p.z1,
        "b0": p.b0, "z0": p.z0,
        "c0": p.c0, "c1": p.c1,
        "gamma": p.gamma, "a_tilde": p.a_tilde,
        "delta_e": p.delta_e, "n_bath": p.n_bath, "mu": p.mu, "beta": p.beta,
        "mass_total": p.mass_total_amu, "mass_reduced": p.mass_reduced_amu,
    }
    for section, keys in _SCHEMA.items():
        doc[section] = {key: values[field] for key, field in keys.items()}
    doc["fermi_convention"] = p.fermi_convention
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


# ---------------------------------------------------------------------------
# diabatic surfaces


def morse(r, d, a):
    """Morse well d*[exp(-2*a*r) - 2*exp(-a*r)], minimum -d at r = 0."""
    e = np.exp(-a * np.asarray(r, dtype=float))
    return d * (e * e - 2.0 * e)


def morse_deriv(r, d, a):
    """d/dr of `morse`."""
    e = np.exp(-a * np.asarray(r, dtype=float))
    return 2.0 * a * d * (e - e * e)


def neutral_potential(r, z, p: ModelParameters):
    """Neutral diabat: bond Morse + exponential surface repulsion + c0."""
    return morse(np.asarray(r) - p.r0, p.d0, p.a0) \
        + np.exp(-p.b0 * (np.asarray(z) - p.z0)) + p.c0


def anion_potential(r, z, p: ModelParameters):
    """Anion diabat: bond Morse + surface Morse well + c1."""
    return morse(np.asarray(r) - p.r1, p.d1, p.a1) \
        + morse(np.asarray(z) - p.z1, p.d2, p.a2) + p.c1


def gap(r, z, p: ModelParameters):
    """Charge-transfer gap: anion diabat minus neutral diabat.

    This is the energy of the molecular level in the impurity Hamiltonian and
    the scale an electron has to cross when hopping between metal and
    molecule.
    """
    return anion_potential(r, z, p) - neutral_potential(r, z, p)


def neutral_gradient(r, z, p: ModelParameters):
    """(d/dR, d/dZ) of the neutral diabat."""
    dr = morse_deriv(np.asarray(r) - p.r0, p.d0, p.a0)
    dz = -p.b0 * np.exp(-p.b0 * (np.asarray(z) - p.z0))
    return dr, dz


def gap_gradient(r, z, p: ModelParameters):
    """(d/dR, d/dZ) of the charge-transfer gap."""
    dr = morse_deriv(np.asarray(r) - p.r1, p.d1, p.a1) \
        - morse_deriv(np.asarray(r) - p.r0, p.d0, p.a0)
    dz = morse_deriv(np.asarray(z) - p.z1, p.d2, p.a2) \
        + p.b0 * np.exp(-p.b0 * (np.asarray(z) - p.z0))
    return dr, dz


# ---------------------------------------------------------------------------
# metal band


@dataclass(frozen=True)
class BandDiscretization:
    """Uniform midpoint discretization of the metal band.

    energies: level positions eps_k, symmetric about mu.
    coupling_scale: per-level coupling prefactor sqrt(Gamma/2pi) * w_k.
    weight: w_k = sqrt(DeltaE/N), identical for every level here.
    """

    energies: np.ndarray
    coupling_scale: np.ndarray
    weight: np.ndarray

    @property
    def n(self):
        return self.energies.size


def discretize_band(p: ModelParameters, n: int | None = None) -> BandDiscretization:
    """Place N levels at midpoints of equal slices of [mu - dE/2, mu + dE/2].

    The constant weights make sum(coupling_scale**2) = Gamma*DeltaE/(2*pi)
    independent of N.
    """
    n = p.n_bath if n is None else int(n)
    if n < 1:
        raise ModelError(f"band size must be >= 1, got {n}")
    if p.delta_e <= 0.0:
        raise ModelError(f"band width must be > 0, got {p.delta_e}")
    k = np.arange(n)
    energies = p.mu - 0.5 * p.delta_e + (k + 0.5) * (p.delta_e / n)
    w = np.full(n, math.sqrt(p.delta_e / n))
    vbar = math.sqrt(p.gamma / (2.0 * math.pi)) * w
    return BandDiscretization(energies=energies, coupling_scale=vbar, weight=w)


def coupling_decay(z, p: ModelParameters):
    """Dimensionless Z-decay of the molecule-metal coupling, 1 at Z=0."""
    return 1.0 - np.tanh(np.asarray(z) / p.a_tilde)


def coupling_decay_deriv(z, p: ModelParameters):
    """d/dZ of `coupling_decay`."""
    sech = 1.0 / np.cosh(np.asarray(z) / p.a_tilde)
    return -(sech * sech) / p.a_tilde


def coupling_vk(z, band: BandDiscretization, p: ModelParameters):
    """Per-level coupling V_k(Z); monotone non-increasing in Z."""
    return band.coupling_scale * coupling_decay(z, p)


def fermi_occupation(energy, p: ModelParameters):
    """Equilibrium occupation of a level at the model's (beta, mu).

    The "inverted" convention flips the sign in the exponent; it exists only
    so the two possible readings of the occupation formula can be compared.
    """
    x = p.beta * (np.asarray(energy, dtype=float) - p.mu)
    if p.fermi_convention == "inverted":
        x = -x
    # clip to keep exp() finite for levels far from mu
    return 1.0 / (1.0 + np.exp(np.clip(x, -500.0, 500.0)))


# ---------------------------------------------------------------------------
# adiabatic ground-state energy (used for calibration only)


def arrowhead_matrix(r, z, p: ModelParameters, band: BandDiscretization,
                     gamma: float | None = None):
    """Single-particle level matrix at a geometry.

    Diagonal = (gap, eps_1..eps_N); first row/column = V_k(Z).  `gamma`
    overrides the model coupling strength (used by the calibration loop).
    """
    n = band.n
    h = np.zeros((n + 1, n + 1))
    h[0, 0] = gap(r, z, p)
    h[np.arange(1, n + 1), np.arange(1, n + 1)] = band.energies
    vk = coupling_vk(z, band, p)
    if gamma is not None:
        if p.gamma > 0.0:
            vk = vk * math.sqrt(gamma / p.gamma)
        else:
            vk = math.sqrt(gamma / (2.0 * math.pi)) * band.weight \
                * coupling_decay(z, p)
    h[0, 1:] = vk
    h[1:, 0] = vk
    return h


def adiabatic_ground_energy(r, z, p: ModelParameters,
                            band: BandDiscretization | None = None,
                            gamma: float | None = None,
                            offset: float = 0.0):
    """Ground-state energy: neutral diabat + Fermi-filled level sum.

    Diagonalizes the single-particle matrix and fills every eigenvalue with
    its equilibrium occupation.  `offset` is the additive anchor used to put
    the curve on the same energy zero as reference data; see
    :mod:`nahdyn.calibrate`.
    """
    if band is None:
        band = discretize_band(p)
    r_arr = np.atleast_1d(np.asarray(r, dtype=float))
    z_arr = np.atleast_1d(np.asarray(z, dtype=float))
    if r_arr.shape != z_arr.shape:
        r_arr, z_arr = np.broadcast_arrays(r_arr, z_arr)
    out = np.empty(r_arr.shape)
    for i, (ri, zi) in enumerate(zip(r_arr.ravel(), z_arr.ravel())):
        mat = arrowhead_matrix(ri, zi, p, band, gamma=gamma)
        try:
            lam = np.linalg.eigvalsh(mat)
        except np.linalg.LinAlgError as exc:
            raise GroundEnergyError(ri, zi, exc) from exc
        out.ravel()[i] = neutral_potential(ri, zi, p) \
            + np.sum(fermi_occupation(lam, p) * lam)
    out = out + offset
    if np.isscalar(r) and np.isscalar(z):
        return float(out.ravel()[0])
    return out
