"""Phase-space (Wigner) tables of vibrational eigenstates.

W(R, P) = (1/pi hbar) * integral ds psi(R+s) psi(R-s) exp(2 i P s / hbar)

evaluated exactly for the band-limited (sinc-interpolated) grid eigenstates:
a band-limited integrand is integrated exactly by the half-grid-spacing
Riemann sum, and wavefunction values at half-grid points come from the sinc
basis itself.  The momentum grid is chosen conjugate to the position grid
(dP = 2 pi hbar / (n_p dR)), which makes the discrete marginals exact:
sum_P W dP = |psi(R)|^2 and the table integrates to 1 to machine precision.
The construction is a cosine sum, so the table is real by construction and
may go negative for any excited state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .units import HBAR

__all__ = ["WignerError", "WignerTable", "build_wigner_table"]


class WignerError(ValueError):
    pass


@dataclass
class WignerTable:
    """Tabulated W on (r_grid x p_grid) for vibrational state nu."""

    r_grid: np.ndarray
    p_grid: np.ndarray
    w: np.ndarray  # (n_r, n_p)
    nu: int
    norm: float

    @property
    def dr(self):
        return self.r_grid[1] - self.r_grid[0]

    @property
    def dp(self):
        return self.p_grid[1] - self.p_grid[0]

    def marginal_r(self):
        """integral W dP at each grid R (equals |psi|^2 by construction)."""
        return self.w.sum(axis=1) * self.dp

    def lookup(self, r, p_r):
        """Nearest-node table value; points outside the table return 0.

        This piecewise-constant reading is what the sampler and the
        population estimators share: sampling density and estimator then
        agree cell by cell, so the ensemble self-overlap of a state at t=0
        equals the table's discrete purity (= 1 to grid precision) instead
        of inheriting an interpolation-smoothing loss.
        """
        r = np.asarray(r, dtype=float)
        p_r = np.asarray(p_r, dtype=float)
        fr = (r - self.r_grid[0]) / self.dr
        fp = (p_r - self.p_grid[0]) / self.dp
        nr, npp = self.w.shape
        inside = (fr >= -0.5) & (fr <= nr - 0.5) & \
                 (fp >= -0.5) & (fp <= npp - 0.5)
        i = np.clip(np.rint(fr).astype(int), 0, nr - 1)
        j = np.clip(np.rint(fp).astype(int), 0, npp - 1)
        return np.where(inside, self.w[i, j], 0.0)

    def interpolate(self, r, p_r):
        """Bilinear interpolation; points outside the table return 0.

        Smoother than `lookup` for plotting and quadrature cross-checks, but
        it damps the sub-grid interference fringes of excited states, so it
        is not used in the estimator path.
        """
        r = np.asarray(r, dtype=float)
        p_r = np.asarray(p_r, dtype=float)
        fr = (r - self.r_grid[0]) / self.dr
        fp = (p_r - self.p_grid[0]) / self.dp
        nr, npp = self.w.shape
        inside = (fr >= 0.0) & (fr <= nr - 1) & (fp >= 0.0) & (fp <= npp - 1)
        fr = np.clip(fr, 0.0, nr - 1)
        fp = np.clip(fp, 0.0, npp - 1)
        i = np.minimum(fr.astype(int), nr - 2)
        j = np.minimum(fp.astype(int), npp - 2)
        tr = fr - i
        tp = fp - j
        val = (self.w[i, j] * (1 - tr) * (1 - tp)
               + self.w[i + 1, j] * tr * (1 - tp)
               + self.w[i, j + 1] * (1 - tr) * tp
               + self.w[i + 1, j + 1] * tr * tp)
        return np.where(inside, val, 0.0)

    def inside(self, r, p_r):
        """True where (r, p_r) falls on the table (lookup convention)."""
        r = np.asarray(r, dtype=float)
        p_r = np.asarray(p_r, dtype=float)
        return ((r >= self.r_grid[0] - 0.5 * self.dr)
                & (r <= self.r_grid[-1] + 0.5 * self.dr)
                & (p_r >= self.p_grid[0] - 0.5 * self.dp)
                & (p_r <= self.p_grid[-1] + 0.5 * self.dp))

    def write_csv(self, path):
        """Export rows (R_angstrom, P_eVfs_per_A, W) for inspection."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["R_angstrom", "P_eVfs_per_A", "W"])
            for i, r in enumerate(self.r_grid):
                for j, pp in enumerate(self.p_grid):
                    writer.writerow(
                        [f"{r:.10g}", f"{pp:.10g}", f"{self.w[i, j]:.10g}"]
                    )


def build_wigner_table(psi, r_grid, nu, n_momentum=None,
                       edge_tol=0.05) -> WignerTable:
    """Wigner table of a normalized grid wavefunction.

    psi must satisfy sum(psi**2) * dr = 1 on the uniform r_grid.  The shift
    integral is truncated at the grid edges, so the wavefunction must have
    decayed there: edge amplitude above `edge_tol` (relative to the peak)
    raises.  The tolerance is deliberately loose - high vibrational states on
    the production grid keep percent-level amplitude at the inner wall
    without harming the table (marginals stay exact by construction).
    """
    psi = np.asarray(psi, dtype=float)
    r_grid = np.asarray(r_grid, dtype=float)
    n = psi.size
    if r_grid.size != n:
        raise WignerError("psi and r_grid size mismatch")
    dr = r_grid[1] - r_grid[0]
    norm0 = float(np.sum(psi * psi) * dr)
    if abs(norm0 - 1.0) > 1e-8:
        raise WignerError(f"wavefunction not normalized on grid: {norm0}")
    peak = np.abs(psi).max()
    edge = max(abs(psi[0]), abs(psi[-1])) / peak
    if edge > edge_tol:
        raise WignerError(
            f"grid too small for state nu={nu}: edge amplitude {edge:.2e} "
            f"of peak exceeds {edge_tol:.0e}; widen the grid"
        )

    n_p = n if n_momentum is None else int(n_momentum)
    if n_p < n:
        raise WignerError("need at least as many momentum as position points")

    # wavefunction on the half-spacing grid via the sinc basis (exact for the
    # band-limited interpolant; integer offsets reproduce psi itself)
    half_pos = r_grid[0] + 0.5 * dr * np.arange(2 * n - 1)
    psi_half = np.sinc((half_pos[:, None] - r_grid[None, :]) / dr) @ psi

    # conjugate momentum grid: full aliasing-free window, symmetric about 0
    dp = 2.0 * np.pi * HBAR / (n_p * dr)
    p_grid = (np.arange(n_p) - (n_p - 1) / 2.0) * dp

    w = np.empty((n, n_p))
    jmax_all = 2 * np.minimum(np.arange(n), n - 1 - np.arange(n))
    # cos(P j dr / hbar) for all shifts used anywhere
    j_all = np.arange(jmax_all.max() + 1)
    cos_table = np.cos(np.outer(j_all, p_grid) * (dr / HBAR))
    scale = dr / (2.0 * np.pi * HBAR)
    for i in range(n):
        jmax = jmax_all[i]
        j = np.arange(1, jmax + 1)
        a0 = psi_half[2 * i] ** 2
        if jmax:
            aj = psi_half[2 * i + j] * psi_half[2 * i - j]
            w[i] = scale * (a0 + 2.0 * (aj @ cos_table[1:jmax + 1]))
        else:
            w[i] = scale * a0

    norm = float(w.sum() * dr * dp)
    if abs(norm - 1.0) > 1e-6:
        raise WignerError(f"table normalization off: {norm}")
    return WignerTable(r_grid=r_grid, p_grid=p_grid, w=w, nu=int(nu), norm=norm)
