"""Bound vibrational eigenstates of the free molecule on a sinc-DVR grid.

The molecule starts far from the surface, where the bond potential is the
neutral Morse curve, so initial vibrational states are Morse eigenstates.
They are computed on a uniform grid with the sinc (infinite-range
Colbert-Miller) kinetic-energy matrix, which is spectrally accurate and gives
an analytic band-limited interpolation of the eigenfunctions - the property
the phase-space transform in :mod:`nahdyn.wigner` relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelParameters, morse
from .units import HBAR

__all__ = [
    "GridSpec",
    "DvrError",
    "MorseEigenstates",
    "bound_state_count",
    "analytic_morse_energy",
    "morse_eigenstates",
]


class DvrError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Uniform bond-length grid (angstrom)."""

    r_min: float = 0.9
    r_max: float = 2.4
    n_points: int = 75

    def __post_init__(self):
        if not (self.r_max > self.r_min and self.n_points >= 8):
            raise DvrError(f"bad grid spec {self}")

    @property
    def points(self):
        return np.linspace(self.r_min, self.r_max, self.n_points)

    @property
    def spacing(self):
        return (self.r_max - self.r_min) / (self.n_points - 1)


def bound_state_count(p: ModelParameters) -> int:
    """Number of bound Morse levels of the neutral bond potential.

    Levels exist for nu < sqrt(2 m D)/(a hbar) - 1/2.
    """
    lam = math.sqrt(2.0 * p.mass_reduced * p.d0) / (p.a0 * HBAR)
    return max(0, math.floor(lam - 0.5) + (0 if (lam - 0.5).is_integer() else 1))


def analytic_morse_energy(nu, p: ModelParameters):
    """Closed-form Morse level, measured from the well minimum."""
    omega = p.a0 * math.sqrt(2.0 * p.d0 / p.mass_reduced)
    e_h = HBAR * omega * (np.asarray(nu) + 0.5)
    return e_h - e_h * e_h / (4.0 * p.d0)


@dataclass
class MorseEigenstates:
    """Grid eigenpairs: energies from the well minimum, rows of psi with
    sum(psi**2) * dr = 1."""

    grid: GridSpec
    energies: np.ndarray
    psi: np.ndarray  # (n_states, n_points)

    @property
    def r(self):
        return self.grid.points

    def state(self, nu: int):
        if not 0 <= nu < self.energies.size:
            raise DvrError(
                f"state {nu} not computed (have 0..{self.energies.size - 1})"
            )
        return self.psi[nu]


def _sinc_kinetic(n, dr, mass):
    """Infinite-range sinc-DVR kinetic matrix."""
    i = np.arange(n)
    diff = i[:, None] - i[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = 2.0 / (diff.astype(float) ** 2)
    t[diff == 0] = math.pi ** 2 / 3.0
    sign = np.where((diff % 2) == 0, 1.0, -1.0)
    return (HBAR ** 2 / (2.0 * mass * dr * dr)) * sign * t


def morse_eigenstates(p: ModelParameters, grid: GridSpec | None = None,
                      n_states: int | None = None) -> MorseEigenstates:
    """Diagonalize the bond Morse on the grid and keep the lowest eigenpairs.

    Energies are reported relative to the well minimum (so they can be read
    against the closed-form Morse spectrum).  Raises if more states are
    requested than the potential binds.
    """
    grid = grid or GridSpec()
    n_bound = bound_state_count(p)
    if n_states is None:
        n_states = min(n_bound, grid.n_points // 2)
    if n_states > n_bound:
        raise DvrError(
            f"requested {n_states} states but the Morse well binds only "
            f"{n_bound} (analytic bound-state limit)"
        )
    r = grid.points
    ham = _sinc_kinetic(grid.n_points, grid.spacing, p.mass_reduced)
    ham[np.arange(grid.n_points), np.arange(grid.n_points)] += \
        morse(r - p.r0, p.d0, p.a0)
    vals, vecs = np.linalg.eigh(ham)
    vals = vals[:n_states] + p.d0  # shift zero to the well minimum
    vecs = vecs[:, :n_states]
    # DVR coefficients are orthonormal; rescale to a grid wavefunction and fix
    # a deterministic sign (largest-magnitude lobe positive)
    psi = (vecs / math.sqrt(grid.spacing)).T
    for row in psi:
        k = np.argmax(np.abs(row))
        if row[k] < 0.0:
            row *= -1.0
    return MorseEigenstates(grid=grid, energies=vals, psi=psi)
