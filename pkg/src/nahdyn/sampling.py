"""Initial-condition sampling for trajectory ensembles.

Three independent factors:

* translation (Z, P_Z): Gaussian phase-space density of a minimum-uncertainty
  wavepacket aimed at the surface,
* vibration (R, P_R): Metropolis random walk on the absolute value of the
  initial state's Wigner table, recording the sign of W at each draw (the
  quasi-distribution is signed once the state is excited),
* electronic oscillators: every metal level is occupied or not by a coin flip
  against its equilibrium occupation, then (x_k, p_k) is placed on the circle
  of radius sqrt(2 n_k + zpe) at a uniform random angle.  The molecular level
  starts empty.

The zero-point parameter `zpe` defaults to 0, so unoccupied levels start at
exactly the phase-space origin.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .mapping import MappedState, ModelContext
from .model import BandDiscretization, ModelParameters, fermi_occupation
from .units import HBAR
from .wigner import WignerTable

__all__ = [
    "TRANSLATIONAL_WIDTH",
    "Z_START",
    "SampledInitialCondition",
    "incident_momentum",
    "sample_translational",
    "metropolis_sample_wigner",
    "sample_electronic",
    "build_initial_condition",
]

#: default coherent-state width of the incoming wavepacket (1/A^2)
TRANSLATIONAL_WIDTH = 4.544

#: default starting distance from the surface (A)
Z_START = 5.0


@dataclass
class SampledInitialCondition:
    """One draw from the initial density: phase point + sign weight."""

    state: MappedState
    weight: float
    occupations: np.ndarray


def incident_momentum(e_i, params: ModelParameters):
    """Incoming center-of-mass momentum -sqrt(2 m E) (eV fs/A)."""
    if e_i <= 0.0:
        raise ValueError(f"incident energy must be > 0, got {e_i}")
    return -math.sqrt(2.0 * params.mass_total * e_i)


def sample_translational(e_i, params: ModelParameters, rng,
                         z_start=Z_START, width=TRANSLATIONAL_WIDTH):
    """Draw (Z, P_Z) from the Gaussian wavepacket density.

    Position variance 1/(2*width), momentum variance hbar^2*width/2, centered
    at (z_start, incident momentum).
    """
    z = rng.normal(z_start, math.sqrt(0.5 / width))
    pz = rng.normal(incident_momentum(e_i, params),
                    HBAR * math.sqrt(0.5 * width))
    return z, pz


def _wrap(value, lo, hi):
    return lo + (value - lo) % (hi - lo)


def metropolis_sample_wigner(table: WignerTable, n_samples, rng,
                             step_scale=0.1, burn_in=1000, thin=50,
                             tune=True):
    """Markov-chain draws from |W| with the sign of W recorded per draw.

    Random-walk proposals wrap periodically on both table axes.  During
    burn-in the step size is retuned every block so the acceptance rate lands
    in the 40-60% window; it is frozen afterwards.  Returns
    (samples (n, 2), signs (n,), info dict).
    """
    r_lo, r_hi = table.r_grid[0], table.r_grid[-1]
    p_lo, p_hi = table.p_grid[0], table.p_grid[-1]
    r_span = r_hi - r_lo
    p_span = p_hi - p_lo

    i0, j0 = np.unravel_index(np.argmax(np.abs(table.w)), table.w.shape)
    r, p = table.r_grid[i0], table.p_grid[j0]
    f = abs(float(table.lookup(r, p)))

    def attempt(r, p, f, scale):
        rn = _wrap(r + rng.normal() * scale * r_span, r_lo, r_hi)
        pn = _wrap(p + rng.normal() * scale * p_span, p_lo, p_hi)
        fn = abs(float(table.lookup(rn, pn)))
        if f <= 0.0 or rng.random() < fn / f:
            return rn, pn, fn, True
        return r, p, f, False

    # burn-in with multiplicative step retuning per block
    block = 100
    n_blocks = max(1, burn_in // block)
    for _ in range(n_blocks):
        accepted = 0
        for _ in range(block):
            r, p, f, ok = attempt(r, p, f, step_scale)
            accepted += ok
        if tune:
            rate = accepted / block
            step_scale = float(np.clip(step_scale * np.clip(rate / 0.5, 0.4, 2.5),
                                       1e-4, 2.0))

    accepted = 0
    total = 0
    samples = np.empty((n_samples, 2))
    signs = np.empty(n_samples)
    for i in range(n_samples):
        for _ in range(thin):
            r, p, f, ok = attempt(r, p, f, step_scale)
            accepted += ok
            total += 1
        samples[i] = (r, p)
        signs[i] = 1.0 if float(table.lookup(r, p)) >= 0.0 else -1.0

    acceptance = accepted / max(total, 1)
    info = {"acceptance": acceptance, "step_scale": step_scale,
            "burn_in": burn_in, "thin": thin, "nu": table.nu}
    if not 0.2 <= acceptance <= 0.8:
        warnings.warn(
            f"Metropolis acceptance {acceptance:.2f} outside [0.2, 0.8] "
            f"after tuning (nu={table.nu}, step_scale={step_scale:.3g})",
            RuntimeWarning,
        )
    return samples, signs, info


def sample_electronic(band: BandDiscretization, params: ModelParameters, rng,
                      zpe=0.0):
    """Focused draw of the mapped oscillators.

    Metal level k is occupied when a uniform variate falls below its
    equilibrium occupation; the molecular level (index 0) is always empty.
    Returns (x, p, occupations) with arrays of length N+1.
    """
    n = band.n
    occ = np.zeros(n + 1)
    occ[1:] = (rng.random(n) <= fermi_occupation(band.energies, params))
    theta = rng.uniform(0.0, 2.0 * math.pi, n + 1)
    radius = np.sqrt(2.0 * occ + zpe)
    return radius * np.cos(theta), radius * np.sin(theta), occ.astype(np.int8)


def build_initial_condition(vib_sample, sign, e_i, ctx: ModelContext, rng,
                            z_start=Z_START, width=TRANSLATIONAL_WIDTH,
                            zpe=0.0) -> SampledInitialCondition:
    """Assemble one trajectory's initial condition.

    `vib_sample` is one (R, P_R) row from `metropolis_sample_wigner` with its
    `sign`; translation and electronic factors are drawn from `rng`, which
    should be this trajectory's private stream.
    """
    z, pz = sample_translational(e_i, ctx.params, rng, z_start, width)
    x, p, occ = sample_electronic(ctx.band, ctx.params, rng, zpe)
    state = MappedState(
        r=float(vib_sample[0]), z=float(z),
        pr=float(vib_sample[1]), pz=float(pz),
        x=x, p=p, n_electrons=int(occ.sum()),
    )
    return SampledInitialCondition(state=state, weight=float(sign),
                                   occupations=occ)
