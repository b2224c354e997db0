"""Estimators and sign-weighted ensemble aggregation.

Phase-space estimators per trajectory:

* bond length R and surface distance Z read off directly,
* level occupations (x_k^2 + p_k^2 - zpe)/2,
* vibrational-state projectors: 2 pi hbar times the target state's Wigner
  table interpolated at the trajectory's (R, P_R); points off the table count
  as zero (and are tallied separately as leaked amplitude).

Ensemble averages use the self-normalizing ratio estimator
sum(s_i B_i) / sum(s_i) over the vibrational sign weights s_i, with a
delta-method standard error.  Final-state probabilities are plateau values:
each trajectory's estimator is time-averaged over the trailing window of the
run, and the reported uncertainty combines the ensemble standard error with
the residual oscillation of the ensemble series inside that window.

Aggregation is streaming (moment accumulators), so adding trajectories batch
by batch in index order gives results identical to a single pass.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .mapping import ModelContext
from .propagate import (
    BatchResult,
    DISCARD_BOND,
    DISCARD_ENERGY,
    DISCARD_NONE,
    TrajectoryRecord,
)
from .units import HBAR
from .wigner import WignerTable

__all__ = [
    "ObservableSeries",
    "AggregateResult",
    "EnsembleAccumulator",
    "aggregate",
    "estimate_anion_population",
    "estimate_vib_population",
]


def estimate_anion_population(state, zpe=0.0):
    """Occupation of the molecular level for one phase point."""
    return 0.5 * (state.x[0] ** 2 + state.p[0] ** 2 - zpe)


def estimate_vib_population(r, pr, table: WignerTable):
    """Projector estimator on vibrational state `table.nu`; 0 off the table."""
    return 2.0 * math.pi * HBAR * table.lookup(r, pr)


@dataclass
class ObservableSeries:
    name: str
    times: np.ndarray
    values: np.ndarray
    stderr: np.ndarray


@dataclass
class AggregateResult:
    series: dict
    final_states: list          # rows {nu, probability, stderr}
    leaked_probability: float
    leaked_stderr: float
    plateau_window: tuple
    n_total: int
    n_used: int
    n_discarded_energy: int
    n_discarded_bond: int
    n_failed: int
    worst_energy_drift: float
    metal_eps: np.ndarray | None = None
    metal_delta: np.ndarray | None = None       # signed occupation change/level
    metal_series: dict | None = None            # times, eps, populations
    diagnostics: dict = field(default_factory=dict)

    @property
    def discard_fraction(self):
        bad = self.n_discarded_energy + self.n_discarded_bond + self.n_failed
        return bad / max(self.n_total, 1)


class _RatioMoments:
    """Streaming moments of (s, s*b) per column for the ratio estimator."""

    def __init__(self, n_cols):
        self.n = 0
        self.sum_g = 0.0
        self.sum_f = np.zeros(n_cols)
        self.sum_f2 = np.zeros(n_cols)
        self.sum_fg = np.zeros(n_cols)

    def add(self, signs, values):
        # values: (B, n_cols); signs: (B,)
        f = signs[:, None] * values
        self.n += signs.size
        self.sum_g += signs.sum()
        self.sum_f += f.sum(axis=0)
        self.sum_f2 += (f * f).sum(axis=0)
        self.sum_fg += values.sum(axis=0)  # s^2 = 1

    def mean(self):
        if self.n == 0 or self.sum_g == 0.0:
            return np.full_like(self.sum_f, np.nan)
        return self.sum_f / self.sum_g

    def stderr(self):
        n = self.n
        if n < 2 or self.sum_g == 0.0:
            return np.full_like(self.sum_f, np.nan)
        g_mean = self.sum_g / n
        f_mean = self.sum_f / n
        ratio = f_mean / g_mean
        var_f = (self.sum_f2 - n * f_mean * f_mean) / (n - 1)
        var_g = (n - n * g_mean * g_mean) / (n - 1)
        cov = (self.sum_fg - n * f_mean * g_mean) / (n - 1)
        var_r = (var_f - 2.0 * ratio * cov + ratio * ratio * var_g) \
            / (n * g_mean * g_mean)
        return np.sqrt(np.maximum(var_r, 0.0))


class EnsembleAccumulator:
    """Reduces trajectory batches into ensemble series and final-state rows.

    `nu_list` selects which vibrational projectors are tracked; `tables` maps
    each nu to its Wigner table.  Discarded trajectories are counted and
    excluded from every average.
    """

    def __init__(self, times, tables: dict, nu_list, plateau_fraction=0.2,
                 zpe=0.0, ctx: ModelContext | None = None,
                 mechanism_band=0.5):
        self.times = np.asarray(times)
        self.tables = tables
        self.nu_list = list(nu_list)
        self.zpe = zpe
        self.ctx = ctx
        self.mechanism_band = mechanism_band
        n_rec = self.times.size
        t_end = self.times[-1]
        self.window = self.times >= t_end * (1.0 - plateau_fraction)
        self.plateau_window = (float(self.times[self.window][0]), float(t_end))

        self._scalars = {name: _RatioMoments(n_rec) for name in
                         ("bond_length", "surface_distance",
                          "anion_population", "metal_above_mu_population")}
        self._vib = {nu: _RatioMoments(n_rec) for nu in self.nu_list}
        self._vib_final = {nu: _RatioMoments(1) for nu in self.nu_list}
        self._leak_final = _RatioMoments(1)
        self._metal_delta = None
        self._metal_series_sum = None
        self._metal_series_gsum = 0.0
        self.n_total = 0
        self.n_used = 0
        self.n_energy = 0
        self.n_bond = 0
        self.n_failed = 0
        self.worst_drift = 0.0

    def add_failed(self, count):
        self.n_total += count
        self.n_failed += count

    def add_batch(self, result: BatchResult, signs):
        signs = np.asarray(signs, dtype=float)
        if result.times.size != self.times.size or \
                not np.allclose(result.times, self.times):
            raise ValueError("batch recorded on a different time grid")
        self.n_total += result.n_trajectories
        self.n_energy += int(np.sum(result.discard == DISCARD_ENERGY))
        self.n_bond += int(np.sum(result.discard == DISCARD_BOND))
        good = result.discard == DISCARD_NONE
        if result.max_drift.size:
            self.worst_drift = max(self.worst_drift,
                                   float(result.max_drift[good].max(initial=0.0)))
        if not np.any(good):
            return
        s = signs[good]
        self.n_used += s.size

        self._scalars["bond_length"].add(s, result.r[good])
        self._scalars["surface_distance"].add(s, result.z[good])
        self._scalars["anion_population"].add(
            s, result.pop0[good] - 0.5 * self.zpe)
        if self.ctx is not None:
            n_above = int(np.sum(self.ctx.eps > self.ctx.params.mu))
        else:
            n_above = 0
        self._scalars["metal_above_mu_population"].add(
            s, result.above_mu[good] - 0.5 * self.zpe * n_above)

        r = result.r[good]
        pr = result.pr[good]
        for nu in self.nu_list:
            vals = estimate_vib_population(r, pr, self.tables[nu])
            self._vib[nu].add(s, vals)
            self._vib_final[nu].add(
                s, vals[:, self.window].mean(axis=1)[:, None])
        any_table = self.tables[self.nu_list[0]]
        outside = ~any_table.inside(r, pr)
        self._leak_final.add(
            s, outside[:, self.window].mean(axis=1)[:, None])

        if self._metal_delta is None:
            self._metal_delta = _RatioMoments(result.metal_start.shape[1])
        self._metal_delta.add(
            s, (result.metal_end - result.metal_start)[good]
            - 0.0 * self.zpe)
        if result.metal_pops is not None:
            contrib = np.tensordot(s, result.metal_pops[good], axes=(0, 0))
            if self._metal_series_sum is None:
                self._metal_series_sum = contrib
                self._metal_series_times = result.metal_times
            else:
                self._metal_series_sum += contrib
            self._metal_series_gsum += s.sum()

    def finalize(self) -> AggregateResult:
        if self.n_used == 0:
            raise RuntimeError("all trajectories were discarded")
        series = {}
        for name, acc in self._scalars.items():
            series[name] = ObservableSeries(name, self.times, acc.mean(),
                                            acc.stderr())
        for nu, acc in self._vib.items():
            name = f"vib_population_nu{nu}"
            series[name] = ObservableSeries(name, self.times, acc.mean(),
                                            acc.stderr())

        final_rows = []
        for nu in self.nu_list:
            mean = float(self._vib_final[nu].mean()[0])
            se = float(self._vib_final[nu].stderr()[0])
            vals = series[f"vib_population_nu{nu}"].values[self.window]
            osc = float(np.std(vals)) if vals.size > 1 else 0.0
            final_rows.append({
                "nu": int(nu),
                "probability": mean,
                "stderr": float(math.hypot(se, osc)),
            })
        leaked = float(self._leak_final.mean()[0])
        leaked_se = float(self._leak_final.stderr()[0])

        metal_eps = self.ctx.eps.copy() if self.ctx is not None else None
        metal_delta = (self._metal_delta.mean()
                       if self._metal_delta is not None else None)
        metal_series = None
        if self._metal_series_sum is not None and self._metal_series_gsum:
            metal_series = {
                "times": self._metal_series_times,
                "eps": metal_eps,
                "populations":
                    self._metal_series_sum / self._metal_series_gsum,
            }

        diagnostics = {}
        if metal_delta is not None and metal_eps is not None:
            absd = np.abs(metal_delta)
            total = absd.sum()
            inband = absd[np.abs(metal_eps - self.ctx.params.mu)
                          <= self.mechanism_band].sum()
            diagnostics["metal_change_band_fraction"] = \
                float(inband / total) if total > 0 else float("nan")
            diagnostics["mechanism_band_eV"] = self.mechanism_band
        z_mean = series["surface_distance"].values
        diagnostics["turning_time_fs"] = float(self.times[np.argmin(z_mean)])
        diagnostics["closest_approach_A"] = float(np.min(z_mean))

        return AggregateResult(
            series=series,
            final_states=final_rows,
            leaked_probability=leaked,
            leaked_stderr=leaked_se,
            plateau_window=self.plateau_window,
            n_total=self.n_total,
            n_used=self.n_used,
            n_discarded_energy=self.n_energy,
            n_discarded_bond=self.n_bond,
            n_failed=self.n_failed,
            worst_energy_drift=self.worst_drift,
            metal_eps=metal_eps,
            metal_delta=metal_delta,
            metal_series=metal_series,
            diagnostics=diagnostics,
        )


def _records_to_batch(records, ctx: ModelContext) -> BatchResult:
    """Pack scalar trajectory records into a batch-shaped container."""
    times = records[0].times
    nb = len(records)
    n = ctx.band.n
    get = lambda key: np.vstack([rec.series[key] for rec in records])
    codes = {"none": DISCARD_NONE, "energy": DISCARD_ENERGY,
             "bond_range": DISCARD_BOND}
    pops_end = np.vstack([
        0.5 * (rec.final_state.x[1:] ** 2 + rec.final_state.p[1:] ** 2)
        for rec in records])
    return BatchResult(
        times=times,
        r=get("r"), z=get("z"), pr=get("pr"), pz=get("pz"),
        pop0=get("pop0"), above_mu=get("above_mu"), energy=get("energy"),
        max_drift=np.array([rec.max_energy_drift for rec in records]),
        discard=np.array([codes[rec.discard_reason] for rec in records],
                         dtype=np.uint8),
        n_electrons=np.array([float(rec.final_state.n_electrons)
                              for rec in records]),
        metal_start=np.zeros((nb, n)),
        metal_end=pops_end,
        final_c=np.vstack([(rec.final_state.x + 1j * rec.final_state.p)[None]
                           for rec in records]),
    )


def aggregate(records, weights, tables: dict, nu_list,
              ctx: ModelContext | None = None, plateau_fraction=0.2,
              zpe=0.0) -> AggregateResult:
    """Aggregate a list of TrajectoryRecord (all on one time grid).

    Same arithmetic as the streaming batch path; a single trajectory with
    weight +1 reproduces that trajectory's series exactly.  Initial metal
    occupations are not kept on scalar records, so the per-level change
    diagnostic is meaningful only through the batch interface.
    """
    records = list(records)
    if not records:
        raise RuntimeError("nothing to aggregate")
    for rec in records[1:]:
        if rec.times.size != records[0].times.size or \
                not np.allclose(rec.times, records[0].times):
            raise ValueError("records on different time grids")
    acc = EnsembleAccumulator(records[0].times, tables, nu_list,
                              plateau_fraction=plateau_fraction, zpe=zpe,
                              ctx=ctx)
    acc.add_batch(_records_to_batch(records, ctx), np.asarray(weights))
    return acc.finalize()
