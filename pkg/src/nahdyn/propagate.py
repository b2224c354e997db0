"""Time propagation with conservation checks and trajectory filters.

One nuclear step is the palindrome

    kick(dt/2) . drift(dt/2) . rotate(dt) . drift(dt/2) . kick(dt/2)

where the kicks move nuclear momenta with the analytic forces at the current
mapping variables, the drifts move (R, Z), and rotate advances the mapping
variables under the level matrix frozen at the midpoint geometry.  The
rotation is a Cayley (Crank-Nicolson) transform applied in `electronic
substeps`, solved in O(N) through the arrowhead structure: it is exactly
unitary, so the total mapped occupation is conserved to round-off
independent of the step size, and exactly invertible, so the whole step is
time-reversible.  The composition is second order in dt.

Everything propagates in batches (leading axis = trajectory); per-trajectory
reductions run along the level axis only, so results are independent of how
trajectories are grouped.  The scalar API wraps batches of one.

Three interchangeable inner loops: "cayley" (compiled, the production
default), "cayley-numpy" (same arithmetic in plain numpy, kept as a readable
reference), and "exact" (dense eigensolve rotation, affordable for small N;
used as an oracle in tests).

Trajectories are never aborted mid-flight: bond-length and energy-drift
violations are recorded as discard flags so the ensemble layer can drop them
from averages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .mapping import MappedState, ModelContext, batch_energy, batch_forces
from .model import coupling_decay, gap
from .units import BOHR, HBAR

__all__ = [
    "IntegratorConfig",
    "TrajectoryRecord",
    "BatchResult",
    "PropagationError",
    "step",
    "propagate_batch",
    "run_trajectory",
]

DISCARD_NONE = 0
DISCARD_ENERGY = 1
DISCARD_BOND = 2

DISCARD_LABELS = {DISCARD_NONE: "none", DISCARD_ENERGY: "energy",
                  DISCARD_BOND: "bond_range"}


class PropagationError(RuntimeError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    """Step size and filter settings.

    dt and t_max in fs; the bond-length window is stated in angstrom (the
    defaults correspond to 0.5 and 10 bohr).  energy_tol is the relative
    total-energy drift above which a trajectory is discarded.  Negative dt is
    legal and runs the reversed dynamics (used by the reversibility checks).
    """

    dt: float = 1.5e-2
    t_max: float = 500.0
    energy_tol: float = 1e-3
    r_min: float = 0.5 * BOHR
    r_max: float = 10.0 * BOHR
    electronic_substeps: int = 1
    record_stride: float = 0.5
    propagator: str = "cayley"

    def __post_init__(self):
        if self.dt == 0.0 or self.t_max <= 0.0:
            raise ValueError("dt must be nonzero and t_max > 0")
        if self.energy_tol <= 0.0:
            raise ValueError("energy_tol must be > 0")
        if not self.r_min < self.r_max:
            raise ValueError("need r_min < r_max")
        if self.electronic_substeps < 1:
            raise ValueError("electronic_substeps must be >= 1")
        if self.propagator not in ("cayley", "cayley-numpy", "exact"):
            raise ValueError(f"unknown propagator {self.propagator!r}")

    @property
    def n_steps(self):
        return max(1, int(round(self.t_max / abs(self.dt))))

    @property
    def stride_steps(self):
        return max(1, int(round(self.record_stride / abs(self.dt))))


@dataclass
class BatchResult:
    """Recorded observables for a batch of trajectories.

    Populations are raw mapped occupations (x^2 + p^2)/2 with no zero-point
    subtraction; estimators apply their own bookkeeping.
    """

    times: np.ndarray          # (n_rec,)
    r: np.ndarray              # (B, n_rec)
    z: np.ndarray
    pr: np.ndarray
    pz: np.ndarray
    pop0: np.ndarray           # molecular-level occupation
    above_mu: np.ndarray       # summed occupation of levels above mu
    energy: np.ndarray         # total energy at record points
    max_drift: np.ndarray      # (B,) max |E - E0| / |E0|
    discard: np.ndarray        # (B,) discard codes
    n_electrons: np.ndarray    # (B,)
    metal_start: np.ndarray    # (B, N)
    metal_end: np.ndarray      # (B, N)
    final_c: np.ndarray        # (B, N+1) complex mapping variables at exit
    metal_times: np.ndarray | None = None
    metal_pops: np.ndarray | None = None  # (B, n_mrec, N)

    @property
    def n_trajectories(self):
        return self.r.shape[0]


@dataclass
class TrajectoryRecord:
    """Single-trajectory view: time series plus conservation diagnostics."""

    times: np.ndarray
    series: dict
    e0: float
    max_energy_drift: float
    discard_reason: str
    final_state: MappedState
    exit_time: float


# ---------------------------------------------------------------------------
# drivers: hold the propagating arrays and advance them chunk-wise


class _Driver:
    def __init__(self, r, z, pr, pz, c, ne, ctx: ModelContext,
                 cfg: IntegratorConfig):
        self.r = np.array(r, dtype=float)
        self.z = np.array(z, dtype=float)
        self.pr = np.array(pr, dtype=float)
        self.pz = np.array(pz, dtype=float)
        self.c = np.ascontiguousarray(c, dtype=complex).copy()
        self.ne = np.array(ne, dtype=float)
        self.ctx = ctx
        self.cfg = cfg
        self.bond_bad = np.zeros(self.r.size, dtype=np.bool_)
        self.f_r = np.zeros_like(self.r)
        self.f_z = np.zeros_like(self.z)
        self._forces_ready = False

    def advance(self, n_steps):
        raise NotImplementedError


class _NumbaDriver(_Driver):
    def advance(self, n_steps):
        p = self.ctx.params
        _kernels.step_chunk(
            self.r, self.z, self.pr, self.pz, self.c, self.ne,
            self.f_r, self.f_z, not self._forces_ready,
            self.ctx.eps, self.ctx.vbar, self.ctx.sum_eps,
            p.d0, p.a0, p.r0, p.d1, p.a1, p.r1, p.d2, p.a2, p.z1,
            p.b0, p.z0, p.c0, p.c1, p.a_tilde,
            p.mass_reduced, p.mass_total, HBAR,
            self.cfg.dt, self.cfg.electronic_substeps, n_steps,
            self.cfg.r_min, self.cfg.r_max, self.bond_bad,
        )
        self._forces_ready = True


class _PythonDriver(_Driver):
    """Reference implementation; also hosts the dense "exact" rotation."""

    def __init__(self, *args):
        super().__init__(*args)
        self._alpha = self.cfg.dt / self.cfg.electronic_substeps / (2.0 * HBAR)

    def _tilde_pieces(self, r, z):
        ctx = self.ctx
        h = gap(r, z, ctx.params)
        g = coupling_decay(z, ctx.params)
        tshift = (h + ctx.sum_eps) / ctx.n_levels
        return h, g, tshift

    def _rotate_cayley(self, r, z):
        # c <- (1 + i a V~)^-1 (1 - i a V~) c  ~  exp(-i V~ dt / hbar) c
        ctx = self.ctx
        c = self.c
        h, g, tshift = self._tilde_pieces(r, z)
        a = self._alpha
        d0 = 1.0 + 1j * a * (h - tshift)
        dk = (1.0 - 1j * a * tshift)[:, None] + (1j * a) * ctx.eps[None, :]
        ak = (1j * a) * (g[:, None] * ctx.vbar[None, :])
        inv_dk = 1.0 / dk
        ak_inv_dk = ak * inv_dk
        s2 = np.sum(ak * ak_inv_dk, axis=1)
        denom0 = 1.0 / (d0 - s2)
        for _ in range(self.cfg.electronic_substeps):
            b0 = c[:, 0]
            bk = c[:, 1:]
            u0 = (b0 - np.sum(ak_inv_dk * bk, axis=1)) * denom0
            uk = bk * inv_dk - ak_inv_dk * u0[:, None]
            c[:, 0] = 2.0 * u0 - b0
            c[:, 1:] = 2.0 * uk - bk

    def _rotate_exact(self, r, z):
        ctx = self.ctx
        c = self.c
        h, g, tshift = self._tilde_pieces(r, z)
        n = ctx.n_levels
        for b in range(c.shape[0]):
            v = np.zeros((n, n))
            v[0, 0] = h[b]
            v[np.arange(1, n), np.arange(1, n)] = ctx.eps
            v[0, 1:] = g[b] * ctx.vbar
            v[1:, 0] = g[b] * ctx.vbar
            v[np.arange(n), np.arange(n)] -= tshift[b]
            lam, u = np.linalg.eigh(v)
            phase = np.exp(-1j * lam * self.cfg.dt / HBAR)
            c[b] = u @ (phase * (u.conj().T @ c[b]))

    def advance(self, n_steps):
        ctx = self.ctx
        cfg = self.cfg
        half = 0.5 * cfg.dt
        if not self._forces_ready:
            self.f_r, self.f_z = batch_forces(
                self.r, self.z, self.c.real, self.c.imag, self.ne, ctx)
            self._forces_ready = True
        for _ in range(n_steps):
            self.pr += half * self.f_r
            self.pz += half * self.f_z
            self.r += half * self.pr / ctx.params.mass_reduced
            self.z += half * self.pz / ctx.params.mass_total
            if cfg.propagator == "exact":
                self._rotate_exact(self.r, self.z)
            else:
                self._rotate_cayley(self.r, self.z)
            self.r += half * self.pr / ctx.params.mass_reduced
            self.z += half * self.pz / ctx.params.mass_total
            self.f_r, self.f_z = batch_forces(
                self.r, self.z, self.c.real, self.c.imag, self.ne, ctx)
            self.pr += half * self.f_r
            self.pz += half * self.f_z
            # not-inside test also catches NaN
            self.bond_bad |= ~((self.r >= cfg.r_min) & (self.r <= cfg.r_max))


def _make_driver(r, z, pr, pz, c, ne, ctx, cfg) -> _Driver:
    if cfg.propagator == "cayley":
        return _NumbaDriver(r, z, pr, pz, c, ne, ctx, cfg)
    return _PythonDriver(r, z, pr, pz, c, ne, ctx, cfg)


# ---------------------------------------------------------------------------


def step(state: MappedState, cfg: IntegratorConfig,
         ctx: ModelContext) -> MappedState:
    """Advance one trajectory by one dt (time-reversible to round-off)."""
    vals = np.concatenate([[state.r, state.z, state.pr, state.pz],
                           state.x, state.p])
    if not np.all(np.isfinite(vals)):
        raise PropagationError("non-finite state handed to step")
    drv = _make_driver([state.r], [state.z], [state.pr], [state.pz],
                       (state.x + 1j * state.p)[None, :],
                       [float(state.n_electrons)], ctx, cfg)
    drv.advance(1)
    return MappedState(float(drv.r[0]), float(drv.z[0]), float(drv.pr[0]),
                       float(drv.pz[0]), drv.c.real[0].copy(),
                       drv.c.imag[0].copy(), state.n_electrons)


def propagate_batch(r, z, pr, pz, c, ne, ctx: ModelContext,
                    cfg: IntegratorConfig, record_metal=False,
                    metal_stride=5.0) -> BatchResult:
    """Propagate a batch to t_max, recording observables every stride.

    Bond-length excursions are checked every step, the relative energy drift
    at every record point.
    """
    drv = _make_driver(r, z, pr, pz, c, ne, ctx, cfg)
    nb = drv.r.size
    n_steps = cfg.n_steps
    stride = cfg.stride_steps
    rec_idx = list(range(0, n_steps + 1, stride))
    if rec_idx[-1] != n_steps:
        rec_idx.append(n_steps)
    n_rec = len(rec_idx)
    above = ctx.eps > ctx.params.mu

    out = BatchResult(
        times=np.array(rec_idx, dtype=float) * abs(cfg.dt),
        r=np.empty((nb, n_rec)), z=np.empty((nb, n_rec)),
        pr=np.empty((nb, n_rec)), pz=np.empty((nb, n_rec)),
        pop0=np.empty((nb, n_rec)), above_mu=np.empty((nb, n_rec)),
        energy=np.empty((nb, n_rec)),
        max_drift=np.zeros(nb), discard=np.zeros(nb, dtype=np.uint8),
        n_electrons=drv.ne.copy(),
        metal_start=0.5 * (np.abs(drv.c[:, 1:]) ** 2),
        metal_end=np.empty((nb, ctx.band.n)),
        final_c=np.empty_like(drv.c),
    )
    if record_metal:
        mstride = max(1, int(round(metal_stride / abs(cfg.dt))))
        m_idx = [s for s in range(0, n_steps + 1, mstride)]
        if m_idx[-1] != n_steps:
            m_idx.append(n_steps)
        out.metal_times = np.array(m_idx, dtype=float) * abs(cfg.dt)
        out.metal_pops = np.empty((nb, len(m_idx), ctx.band.n))
        checkpoints = sorted(set(rec_idx) | set(m_idx))
        m_pos = {s: i for i, s in enumerate(m_idx)}
    else:
        checkpoints = rec_idx
        m_pos = {}
    rec_pos = {s: i for i, s in enumerate(rec_idx)}

    e0 = None

    def record(istep):
        nonlocal e0
        if istep in rec_pos:
            i = rec_pos[istep]
            out.r[:, i] = drv.r
            out.z[:, i] = drv.z
            out.pr[:, i] = drv.pr
            out.pz[:, i] = drv.pz
            pops = 0.5 * (drv.c.real ** 2 + drv.c.imag ** 2)
            out.pop0[:, i] = pops[:, 0]
            out.above_mu[:, i] = np.sum(pops[:, 1:][:, above], axis=1)
            e = batch_energy(drv.r, drv.z, drv.pr, drv.pz,
                             drv.c.real, drv.c.imag, drv.ne, ctx)
            out.energy[:, i] = e
            if e0 is None:
                e0 = e.copy()
            else:
                out.max_drift = np.maximum(
                    out.max_drift, np.abs(e - e0) / np.abs(e0))
        if istep in m_pos:
            out.metal_pops[:, m_pos[istep]] = \
                0.5 * (np.abs(drv.c[:, 1:]) ** 2)

    record(0)
    prev = 0
    for istep in checkpoints:
        if istep == 0:
            continue
        drv.advance(istep - prev)
        prev = istep
        record(istep)

    out.metal_end[:] = 0.5 * (np.abs(drv.c[:, 1:]) ** 2)
    out.final_c[:] = drv.c
    out.discard[out.max_drift > cfg.energy_tol] = DISCARD_ENERGY
    out.discard[drv.bond_bad] = DISCARD_BOND
    good = out.discard == DISCARD_NONE
    if not np.all(np.isfinite(out.energy[good])):
        raise PropagationError(
            "non-finite energies on trajectories that passed the filters")
    return out


def run_trajectory(init, cfg: IntegratorConfig, ctx: ModelContext,
                   vib_table=None, early_stop=False, z_detect=None,
                   plateau_window=20.0, plateau_slope_tol=1e-4,
                   observer=None) -> TrajectoryRecord:
    """Propagate one sampled initial condition and package its record.

    With `early_stop`, propagation ends at the first record point where the
    molecule is outgoing (P_Z > 0), beyond `z_detect` (default: its starting
    distance), and - when a Wigner table for the initial vibrational state is
    supplied - the initial-state survival estimate has flattened: the slope
    of a straight-line fit over the trailing `plateau_window` fs is below
    `plateau_slope_tol` (1/fs).

    `observer(t, state)` is called at every record point.
    """
    state = init.state if hasattr(init, "state") else init
    drv = _make_driver([state.r], [state.z], [state.pr], [state.pz],
                       (state.x + 1j * state.p)[None, :],
                       [float(state.n_electrons)], ctx, cfg)
    z_detect = state.z if z_detect is None else z_detect
    stride = cfg.stride_steps
    n_steps = cfg.n_steps
    above = ctx.eps > ctx.params.mu

    times = [0.0]
    rows = {k: [] for k in
            ("r", "z", "pr", "pz", "pop0", "above_mu", "energy", "vib")}

    def current_state():
        return MappedState(float(drv.r[0]), float(drv.z[0]), float(drv.pr[0]),
                           float(drv.pz[0]), drv.c.real[0].copy(),
                           drv.c.imag[0].copy(), state.n_electrons)

    def record(t):
        pops = 0.5 * (drv.c.real[0] ** 2 + drv.c.imag[0] ** 2)
        rows["r"].append(drv.r[0])
        rows["z"].append(drv.z[0])
        rows["pr"].append(drv.pr[0])
        rows["pz"].append(drv.pz[0])
        rows["pop0"].append(pops[0])
        rows["above_mu"].append(pops[1:][above].sum())
        rows["energy"].append(batch_energy(
            drv.r, drv.z, drv.pr, drv.pz, drv.c.real, drv.c.imag,
            drv.ne, ctx)[0])
        if vib_table is not None:
            rows["vib"].append(2.0 * math.pi * HBAR
                               * float(vib_table.lookup(drv.r[0],
                                                        drv.pr[0])))
        if observer is not None:
            observer(t, current_state())

    record(0.0)
    istep = 0
    while istep < n_steps:
        n_sub = min(stride, n_steps - istep)
        drv.advance(n_sub)
        istep += n_sub
        t = istep * abs(cfg.dt)
        times.append(t)
        record(t)
        if early_stop and drv.pz[0] > 0.0 and drv.z[0] > z_detect:
            if vib_table is None:
                break
            if t >= plateau_window:
                sel = [i for i, tt in enumerate(times)
                       if tt >= t - plateau_window]
                if len(sel) >= 4:
                    tt = np.array([times[i] for i in sel])
                    vv = np.array([rows["vib"][i] for i in sel])
                    slope = np.polyfit(tt, vv, 1)[0]
                    if abs(slope) < plateau_slope_tol:
                        break

    times = np.asarray(times)
    series = {k: np.asarray(v) for k, v in rows.items() if v}
    e = series["energy"]
    drift = float(np.max(np.abs(e - e[0]) / abs(e[0])))
    if drv.bond_bad[0]:
        reason = DISCARD_LABELS[DISCARD_BOND]
    elif drift > cfg.energy_tol:
        reason = DISCARD_LABELS[DISCARD_ENERGY]
    else:
        reason = DISCARD_LABELS[DISCARD_NONE]
    return TrajectoryRecord(
        times=times, series=series, e0=float(e[0]), max_energy_drift=drift,
        discard_reason=reason, final_state=current_state(),
        exit_time=float(times[-1]),
    )
