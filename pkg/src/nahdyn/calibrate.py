"""Calibration of the molecule-metal coupling strength.

The coupling strength is the one free model parameter here: it is chosen so
that the adiabatic ground-state energy of the impurity model matches a table
of reference energies (electronic-structure results in production use; this
module also ships a synthetic stand-in generator because the original
reference dataset is not redistributable).

Before comparing against the reference, every candidate curve is shifted so
that it matches the reference value at a fixed anchor geometry; the fit then
only sees energy differences, which is also what makes the band-size
convergence check meaningful.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .model import (
    BandDiscretization,
    ModelError,
    ModelParameters,
    adiabatic_ground_energy,
    discretize_band,
)

__all__ = [
    "ANCHOR_GEOMETRY",
    "CalibrationError",
    "FitResult",
    "reference_slices",
    "synthetic_reference",
    "write_reference_csv",
    "load_reference_csv",
    "anchored_ground_energy",
    "refit_gamma",
    "band_convergence_table",
]

#: (R, Z) in angstrom where model and reference are pinned to the same zero
ANCHOR_GEOMETRY = (1.6, 6.02)


class CalibrationError(RuntimeError):
    """Raised when the residual has no interior minimum inside the bounds."""

    def __init__(self, message, gamma_grid=None, residual_grid=None):
        super().__init__(message)
        self.gamma_grid = gamma_grid
        self.residual_grid = residual_grid


@dataclass
class FitResult:
    gamma: float
    rms_residual: float
    n_points: int
    gamma_bounds: tuple
    band_sizes: tuple
    per_band: list = field(default_factory=list)  # dicts: n, gamma, rms
    curve_spread: float = 0.0  # max |E0_N - E0_N'| over reference geometries

    def as_dict(self):
        return {
            "gamma_eV": self.gamma,
            "rms_residual_eV": self.rms_residual,
            "n_points": self.n_points,
            "gamma_bounds_eV": list(self.gamma_bounds),
            "band_sizes": list(self.band_sizes),
            "per_band": self.per_band,
            "curve_spread_eV": self.curve_spread,
        }


def reference_slices(n_per_slice=25):
    """Geometry slices used for calibration and convergence checks.

    Three cuts through the (R, Z) plane: surface approach at the equilibrium
    bond length, surface approach at a stretched bond, and a bond scan close
    to the surface.  The anchor geometry is always appended so every table
    built on these slices contains the row the energy zero is pinned at.
    """
    r_eq = 1.1508
    slices = [
        (np.full(n_per_slice, r_eq), np.linspace(1.0, 6.0, n_per_slice)),
        (np.full(n_per_slice, 1.45), np.linspace(1.0, 6.0, n_per_slice)),
        (np.linspace(0.95, 1.80, n_per_slice), np.full(n_per_slice, 2.0)),
    ]
    r = np.concatenate([s[0] for s in slices] + [[ANCHOR_GEOMETRY[0]]])
    z = np.concatenate([s[1] for s in slices] + [[ANCHOR_GEOMETRY[1]]])
    return r, z


def anchored_ground_energy(r, z, p: ModelParameters, band: BandDiscretization,
                           gamma: float, anchor_value: float,
                           anchor_geometry=ANCHOR_GEOMETRY):
    """Ground-state energy with the additive offset fixed at the anchor.

    The offset is recomputed per (gamma, band) so that the curve passes
    through `anchor_value` at `anchor_geometry`.
    """
    raw_anchor = adiabatic_ground_energy(*anchor_geometry, p, band, gamma=gamma)
    offset = anchor_value - raw_anchor
    return adiabatic_ground_energy(r, z, p, band, gamma=gamma, offset=offset)


def synthetic_reference(p: ModelParameters, n_per_slice=25, band_n=200):
    """Reference-energy stand-in generated from the model itself.

    Uses the model's own coupling strength on a large band, anchored to zero
    at the anchor geometry.  Round-tripping the fit against this table must
    recover the generating coupling strength.
    """
    r, z = reference_slices(n_per_slice)
    band = discretize_band(p, n=band_n)
    e = anchored_ground_energy(r, z, p, band, gamma=p.gamma, anchor_value=0.0)
    return np.column_stack([r, z, e])


def write_reference_csv(table, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["R_angstrom", "Z_angstrom", "E_eV"])
        for row in np.asarray(table):
            writer.writerow([f"{row[0]:.10g}", f"{row[1]:.10g}", f"{row[2]:.10g}"])


def load_reference_csv(path):
    """Read a reference table; header row R_angstrom,Z_angstrom,E_eV is mandatory."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ModelError(f"reference file {path} is empty") from None
        expected = ["R_angstrom", "Z_angstrom", "E_eV"]
        if [h.strip() for h in header] != expected:
            raise ModelError(
                f"reference file {path} must start with header "
                f"{','.join(expected)}, got {','.join(header)}"
            )
        rows = [[float(v) for v in row] for row in reader if row]
    if len(rows) < 2:
        raise ModelError(f"reference file {path} needs at least 2 data rows")
    return np.asarray(rows)


def _rms_residual(gamma, reference, p, band, anchor):
    e_model = anchored_ground_energy(
        reference[:, 0], reference[:, 1], p, band, gamma,
        anchor_value=anchor[2], anchor_geometry=(anchor[0], anchor[1]),
    )
    diff = e_model - reference[:, 2]
    return float(np.sqrt(np.mean(diff * diff)))


def _anchor_row(reference):
    """Reference row closest to the nominal anchor geometry.

    Anchoring at an actual table row keeps the zero-of-energy condition exact
    even when the table was computed on a different grid.
    """
    d2 = (reference[:, 0] - ANCHOR_GEOMETRY[0]) ** 2 \
        + (reference[:, 1] - ANCHOR_GEOMETRY[1]) ** 2
    return reference[np.argmin(d2)]


def refit_gamma(reference, p: ModelParameters, gamma_bounds=(0.0, 8.0),
                band_sizes=(50, 100, 200)) -> FitResult:
    """Least-squares coupling strength for a reference-energy table.

    One-dimensional bounded minimization of the RMS residual; the fit is run
    at every band size in `band_sizes` (largest one is reported as the
    result) and the spread of the fitted curves across band sizes is recorded
    as a convergence diagnostic.
    """
    reference = np.asarray(reference, dtype=float)
    if reference.ndim != 2 or reference.shape[1] != 3:
        raise ModelError("reference table must have columns (R, Z, E)")
    if reference.shape[0] < 2:
        raise ModelError("need at least 2 reference points")
    lo, hi = float(gamma_bounds[0]), float(gamma_bounds[1])
    if not (0.0 <= lo < hi):
        raise ModelError(f"bad coupling bounds {gamma_bounds}")
    anchor = _anchor_row(reference)

    per_band = []
    for n in sorted(band_sizes):
        band = discretize_band(p, n=n)
        res = minimize_scalar(
            _rms_residual, bounds=(lo, hi), method="bounded",
            args=(reference, p, band, anchor),
            options={"xatol": 1e-6},
        )
        per_band.append({"n": int(n), "gamma_eV": float(res.x),
                         "rms_eV": float(res.fun)})

    best = per_band[-1]
    gamma_star, rms_star = best["gamma_eV"], best["rms_eV"]

    # boundary diagnosis on a coarse residual curve: a nonzero minimum
    # sitting at an endpoint means the true optimum lies outside the bounds
    # (a zero-residual boundary solution, e.g. a decoupled reference with
    # lower bound 0, is a legitimate fit and passes through)
    band = discretize_band(p, n=per_band[-1]["n"])
    grid = np.linspace(lo, hi, 17)
    curve = np.array([_rms_residual(g, reference, p, band, anchor)
                      for g in grid])
    i_min = int(np.argmin(curve))
    if i_min in (0, grid.size - 1) and curve[i_min] > 1e-9 \
            and rms_star > 1e-9:
        raise CalibrationError(
            f"no interior minimum: residual is still decreasing at the "
            f"{'lower' if i_min == 0 else 'upper'} bound "
            f"{grid[i_min]:g} eV",
            gamma_grid=grid, residual_grid=curve,
        )

    # convergence of the fitted curves across band sizes at gamma_star
    spread = 0.0
    curves = []
    for entry in per_band:
        band_n = discretize_band(p, n=entry["n"])
        curves.append(anchored_ground_energy(
            reference[:, 0], reference[:, 1], p, band_n, gamma_star,
            anchor_value=anchor[2], anchor_geometry=(anchor[0], anchor[1]),
        ))
    for i in range(len(curves) - 1):
        spread = max(spread, float(np.max(np.abs(curves[i + 1] - curves[i]))))

    return FitResult(
        gamma=gamma_star, rms_residual=rms_star, n_points=reference.shape[0],
        gamma_bounds=(lo, hi), band_sizes=tuple(sorted(band_sizes)),
        per_band=per_band, curve_spread=spread,
    )


def band_convergence_table(p: ModelParameters, band_sizes=(50, 100, 200),
                           n_per_slice=25):
    """Max anchored-energy change between successive band sizes on the slices."""
    r, z = reference_slices(n_per_slice)
    rows = []
    prev = None
    for n in sorted(band_sizes):
        band = discretize_band(p, n=n)
        e = anchored_ground_energy(r, z, p, band, p.gamma, anchor_value=0.0)
        delta = float(np.max(np.abs(e - prev))) if prev is not None else float("nan")
        rows.append({"n": int(n), "max_change_eV": delta})
        prev = e
    return rows
