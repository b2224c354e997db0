"""Classical mapped Hamiltonian for the impurity model.

Each electronic state (1 molecular level + N metal levels) becomes a pair of
classical oscillator variables (x_k, p_k), index 0 being the molecular level.
Dynamics runs under the symmetrized form of the mapped Hamiltonian

    H = P.M^-1.P/2 + U~(X) + [x.V~(X).x + p.V~(X).p]/2

where V~ is the level matrix with its trace share removed and U~ absorbs the
trace times the electron count divided by the number of levels.  Written this
way the zero-point parameter of the mapping never enters the equations of
motion; it only appears in population estimators.

Conventions: nuclear (R, Z, P_R, P_Z) are in physical units (angstrom,
eV fs/A); the mapping variables are dimensionless, so their equations of
motion carry 1/hbar (dc/dt = -i V~ c / hbar for c = x + i p).

The level matrix is an arrowhead (diagonal + first row/column), and nothing
here ever materializes it densely in the hot path: energies and forces are
assembled from the diagonal and the coupling column in O(N).  All kernels act
on batches - leading axis is the trajectory - and scalars are handled as
batches of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    BandDiscretization,
    ModelParameters,
    coupling_decay,
    coupling_decay_deriv,
    discretize_band,
    gap,
    gap_gradient,
    neutral_gradient,
    neutral_potential,
)
from .units import HBAR

__all__ = [
    "MappedState",
    "PotentialMatrix",
    "ModelContext",
    "build_potential_matrix",
    "total_energy",
    "forces",
    "batch_energy",
    "batch_forces",
    "electron_count",
]


@dataclass
class MappedState:
    """Phase-space point of one trajectory.

    x, p have length N+1; index 0 is the molecular level.  n_electrons is the
    integer electron count fixed when the trajectory was sampled; it enters
    the state-independent potential shift.
    """

    r: float
    z: float
    pr: float
    pz: float
    x: np.ndarray
    p: np.ndarray
    n_electrons: int

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=float)
        self.p = np.ascontiguousarray(self.p, dtype=float)
        if self.x.shape != self.p.shape or self.x.ndim != 1:
            raise ValueError("x and p must be 1-d arrays of equal length")

    @property
    def n_levels(self):
        return self.x.size

    def copy(self):
        return MappedState(self.r, self.z, self.pr, self.pz,
                           self.x.copy(), self.p.copy(), self.n_electrons)


def electron_count(x, p, zpe=0.0):
    """Total mapped occupation sum((x^2 + p^2 - zpe)/2) over levels."""
    x = np.asarray(x)
    p = np.asarray(p)
    return 0.5 * np.sum(x * x + p * p - zpe, axis=-1)


@dataclass(frozen=True)
class ModelContext:
    """Immutable per-run bundle the propagation kernels read from."""

    params: ModelParameters
    band: BandDiscretization
    eps: np.ndarray = field(init=False)
    vbar: np.ndarray = field(init=False)
    sum_eps: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "eps", np.ascontiguousarray(self.band.energies))
        object.__setattr__(self, "vbar",
                           np.ascontiguousarray(self.band.coupling_scale))
        object.__setattr__(self, "sum_eps", float(self.band.energies.sum()))

    @property
    def n_levels(self):
        return self.band.n + 1

    @classmethod
    def from_params(cls, params: ModelParameters, n: int | None = None):
        return cls(params=params, band=discretize_band(params, n=n))


@dataclass
class PotentialMatrix:
    """Arrowhead level matrix at one geometry, plus the trace bookkeeping.

    Stored sparsely: molecular level energy (the diabat gap), band energies,
    coupling column.  Dense views exist for inspection and small-N tests; the
    propagation never asks for them.
    """

    h: float
    eps: np.ndarray
    vk: np.ndarray
    u0: float
    n_electrons: int

    @property
    def n_levels(self):
        return self.eps.size + 1

    @property
    def trace(self):
        return self.h + float(self.eps.sum())

    @property
    def trace_shift(self):
        return self.trace / self.n_levels

    @property
    def u_tilde(self):
        return self.u0 + self.n_electrons * self.trace / self.n_levels

    def dense(self):
        n = self.n_levels
        v = np.zeros((n, n))
        v[0, 0] = self.h
        v[np.arange(1, n), np.arange(1, n)] = self.eps
        v[0, 1:] = self.vk
        v[1:, 0] = self.vk
        return v

    def dense_traceless(self):
        v = self.dense()
        v -= np.eye(self.n_levels) * self.trace_shift
        return v

    def traceless_matvec(self, vec):
        """V~ @ vec in O(N) using the arrowhead structure."""
        vec = np.asarray(vec)
        out = np.empty_like(vec, dtype=float)
        out[0] = self.h * vec[0] + self.vk @ vec[1:]
        out[1:] = self.eps * vec[1:] + self.vk * vec[0]
        out -= self.trace_shift * vec
        return out


def build_potential_matrix(r, z, params: ModelParameters,
                           band: BandDiscretization,
                           n_electrons: int) -> PotentialMatrix:
    """Level matrix at geometry (r, z) for a trajectory carrying n_electrons."""
    vk = band.coupling_scale * coupling_decay(z, params)
    return PotentialMatrix(
        h=float(gap(r, z, params)),
        eps=band.energies,
        vk=vk,
        u0=float(neutral_potential(r, z, params)),
        n_electrons=int(n_electrons),
    )


# ---------------------------------------------------------------------------
# batch kernels
#
# r, z, pr, pz, ne: shape (B,); x, p: shape (B, N+1).  Per-trajectory
# reductions always run along the last axis so results do not depend on how
# trajectories are grouped into batches.


def _geometry(r, z, ctx: ModelContext):
    p = ctx.params
    u0 = neutral_potential(r, z, p)
    h = gap(r, z, p)
    g = coupling_decay(z, p)
    return u0, h, g


def batch_energy(r, z, pr, pz, x, p, ne, ctx: ModelContext):
    """Total energy of the symmetrized mapped Hamiltonian, per trajectory."""
    prm = ctx.params
    u0, h, g = _geometry(r, z, ctx)
    nlev = ctx.n_levels
    tshift = (h + ctx.sum_eps) / nlev

    x0, p0 = x[..., 0], p[..., 0]
    pop0 = x0 * x0 + p0 * p0
    pops = x[..., 1:] ** 2 + p[..., 1:] ** 2
    cross = x0 * np.sum(ctx.vbar * x[..., 1:], axis=-1) \
        + p0 * np.sum(ctx.vbar * p[..., 1:], axis=-1)

    quad = 0.5 * ((h - tshift) * pop0
                  + np.sum(ctx.eps * pops, axis=-1)
                  - tshift * np.sum(pops, axis=-1)) + g * cross
    u_tilde = u0 + ne * (h + ctx.sum_eps) / nlev
    kinetic = pr * pr / (2.0 * prm.mass_reduced) \
        + pz * pz / (2.0 * prm.mass_total)
    return kinetic + u_tilde + quad


def batch_forces(r, z, x, p, ne, ctx: ModelContext):
    """Nuclear forces (f_r, f_z) = -dH/d(R, Z), per trajectory.

    Analytic gradients only; the Morse/exponential/tanh derivatives come from
    the model module.  The trace bookkeeping contracts to
    n0 + (ne - S)/(N+1), which vanishes identically for zero-ZPE sampling
    (S = ne) but is kept general.
    """
    prm = ctx.params
    du0_dr, du0_dz = neutral_gradient(r, z, prm)
    dh_dr, dh_dz = gap_gradient(r, z, prm)
    dg_dz = coupling_decay_deriv(z, prm)
    nlev = ctx.n_levels

    x0, p0 = x[..., 0], p[..., 0]
    n0 = 0.5 * (x0 * x0 + p0 * p0)
    s = electron_count(x, p)
    shift = n0 + (ne - s) / nlev
    cross = x0 * np.sum(ctx.vbar * x[..., 1:], axis=-1) \
        + p0 * np.sum(ctx.vbar * p[..., 1:], axis=-1)

    f_r = -du0_dr - dh_dr * shift
    f_z = -du0_dz - dh_dz * shift - dg_dz * cross
    return f_r, f_z


def batch_electronic_rates(r, z, x, p, ctx: ModelContext):
    """dx/dt = V~ p / hbar and dp/dt = -V~ x / hbar, per trajectory."""
    prm = ctx.params
    h = gap(r, z, prm)
    g = coupling_decay(z, prm)
    tshift = (h + ctx.sum_eps) / ctx.n_levels

    def matvec(v):
        out = np.empty_like(v)
        vk_v = np.sum(ctx.vbar * v[..., 1:], axis=-1)
        out[..., 0] = h * v[..., 0] + g * vk_v
        out[..., 1:] = ctx.eps * v[..., 1:] \
            + (g * v[..., 0])[..., None] * ctx.vbar
        out -= np.asarray(tshift)[..., None] * v
        return out

    return matvec(p) / HBAR, -matvec(x) / HBAR


# ---------------------------------------------------------------------------
# scalar wrappers (public single-trajectory API)


def total_energy(state: MappedState, pm: PotentialMatrix,
                 params: ModelParameters):
    """Energy of one trajectory; contains no zero-point parameter."""
    kinetic = state.pr ** 2 / (2.0 * params.mass_reduced) \
        + state.pz ** 2 / (2.0 * params.mass_total)
    quad = 0.5 * (state.x @ pm.traceless_matvec(state.x)
                  + state.p @ pm.traceless_matvec(state.p))
    return kinetic + pm.u_tilde + quad


def forces(state: MappedState, pm: PotentialMatrix, params: ModelParameters,
           band: BandDiscretization):
    """(dP_R/dt, dP_Z/dt, dx/dt, dp/dt) for one trajectory."""
    ctx = ModelContext(params=params, band=band)
    r = np.asarray([state.r])
    z = np.asarray([state.z])
    x = state.x[None, :]
    p = state.p[None, :]
    ne = np.asarray([float(state.n_electrons)])
    f_r, f_z = batch_forces(r, z, x, p, ne, ctx)
    dx, dp = batch_electronic_rates(r, z, x, p, ctx)
    return float(f_r[0]), float(f_z[0]), dx[0], dp[0]
