"""Ensemble orchestration: sweeps over incident energies, parallel batches,
checkpointing, and reproducible aggregation.

A run is a grid of cells (one initial vibrational state x a list of incident
translational energies).  Every trajectory index owns a private RNG stream
derived from (seed, cell index, trajectory index), and trajectories are
processed in fixed batches of `checkpoint.interval`, so results are
bit-identical no matter how many workers execute them or whether the run was
interrupted and resumed.  Each finished batch lands atomically in the cell's
checkpoints/ directory; aggregation replays the batches in index order.

Output layout per cell:

    <output_dir>/nu_<nu_i>/E_<E_i>/
        series_<name>.csv      time_fs,value,stderr
        final_states.csv       nu_f,probability,stderr (+ leaked row)
        metal_fan.csv          time_fs,eps_eV,population   (mechanism runs)
        manifest.json          config hash, seed, counts, diagnostics
        checkpoints/batch_####.npz
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__, default_model_path
from .calibrate import band_convergence_table
from .dvr import GridSpec, morse_eigenstates
from .mapping import ModelContext
from .model import ModelError, ModelParameters, coupling_decay, load_model
from .observables import AggregateResult, EnsembleAccumulator
from .propagate import IntegratorConfig, propagate_batch
from .sampling import (
    TRANSLATIONAL_WIDTH,
    Z_START,
    build_initial_condition,
    incident_momentum,
    metropolis_sample_wigner,
)
from .wigner import build_wigner_table

__all__ = ["RunConfig", "RunError", "SweepFailure", "load_run_config",
           "run_sweep", "convergence_report", "cell_dir"]


class RunError(RuntimeError):
    """Configuration/validation problem (CLI maps this to exit code 2)."""


class SweepFailure(RuntimeError):
    """A sweep ran but one or more cells failed entirely."""


@dataclass
class RunConfig:
    model_file: str
    nu_i: int
    e_i_list: list
    n_trajectories: int
    seed: int
    output_dir: str
    workers: int = 1
    dt: float = 1.5e-2
    t_max: float | str = "auto"
    energy_tol: float = 1e-3
    r_min_bohr: float = 0.5
    r_max_bohr: float = 10.0
    electronic_substeps: int = 1
    record_stride: float = 0.5
    z_start: float = Z_START
    translational_width: float = TRANSLATIONAL_WIDTH
    burn_in: int = 1000
    thin: int = 50
    zpe: float = 0.0
    nu_max: int | str = "auto"
    plateau_fraction: float = 0.2
    record_metal: bool = False
    metal_stride: float = 5.0
    mechanism_band: float = 0.5
    checkpoint_interval: int = 250
    grid: GridSpec = field(default_factory=GridSpec)

    def __post_init__(self):
        if self.n_trajectories < 1:
            raise RunError("n_trajectories must be >= 1")
        if self.nu_i < 0:
            raise RunError(f"nu_i must be >= 0, got {self.nu_i}")
        if not self.e_i_list:
            raise RunError("need at least one incident energy")
        if any(e <= 0.0 for e in self.e_i_list):
            raise RunError(f"incident energies must be > 0: {self.e_i_list}")
        if self.workers < 1:
            raise RunError("workers must be >= 1")
        if self.checkpoint_interval < 1:
            raise RunError("checkpoint.interval must be >= 1")

    @property
    def resolved_nu_max(self):
        return self.nu_i + 5 if self.nu_max == "auto" else int(self.nu_max)

    def t_max_for(self, e_i, params: ModelParameters):
        """Propagation time: 2.8 crossings of the approach distance + margin."""
        if self.t_max != "auto":
            return float(self.t_max)
        v_in = abs(incident_momentum(e_i, params)) / params.mass_total
        return float(math.ceil(100.0 + 2.8 * self.z_start / v_in))

    def integrator_for(self, e_i, params) -> IntegratorConfig:
        from .units import BOHR

        return IntegratorConfig(
            dt=self.dt, t_max=self.t_max_for(e_i, params),
            energy_tol=self.energy_tol,
            r_min=self.r_min_bohr * BOHR, r_max=self.r_max_bohr * BOHR,
            electronic_substeps=self.electronic_substeps,
            record_stride=self.record_stride,
        )

    def as_dict(self):
        d = dataclasses.asdict(self)
        d["grid"] = dataclasses.asdict(self.grid)
        return d


_RUN_SCHEMA_KEYS = {
    "model", "nu_i", "E_i_eV", "n_trajectories", "seed", "workers",
    "output_dir", "integrator", "sampling", "observables", "checkpoint",
    "grid",
}


def load_run_config(path) -> RunConfig:
    """Read a run YAML; see the shipped example configs for the schema."""
    path = Path(path)
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise RunError(f"run config {path} does not contain a mapping")
    unknown = set(raw) - _RUN_SCHEMA_KEYS
    if unknown:
        raise RunError(f"run config has unknown keys {sorted(unknown)}")
    for key in ("model", "nu_i", "E_i_eV", "n_trajectories", "seed",
                "output_dir"):
        if key not in raw:
            raise RunError(f"run config is missing required key '{key}'")

    model = raw["model"]
    if model == "default":
        model_file = str(default_model_path())
    else:
        model_file = str((path.parent / model).resolve())

    integ = raw.get("integrator", {}) or {}
    samp = raw.get("sampling", {}) or {}
    obs = raw.get("observables", {}) or {}
    ckpt = raw.get("checkpoint", {}) or {}
    grid = raw.get("grid", {}) or {}

    e_list = raw["E_i_eV"]
    if not isinstance(e_list, (list, tuple)):
        e_list = [e_list]

    def outdir():
        out = Path(raw["output_dir"])
        return str(out if out.is_absolute() else (path.parent / out))

    return RunConfig(
        model_file=model_file,
        nu_i=int(raw["nu_i"]),
        e_i_list=[float(e) for e in e_list],
        n_trajectories=int(raw["n_trajectories"]),
        seed=int(raw["seed"]),
        workers=int(raw.get("workers", 1)),
        output_dir=outdir(),
        dt=float(integ.get("dt_fs", 1.5e-2)),
        t_max=(integ["t_max_fs"] if integ.get("t_max_fs", "auto") == "auto"
               else float(integ["t_max_fs"])) if "t_max_fs" in integ else "auto",
        energy_tol=float(integ.get("energy_tol", 1e-3)),
        r_min_bohr=float(integ.get("r_min_bohr", 0.5)),
        r_max_bohr=float(integ.get("r_max_bohr", 10.0)),
        electronic_substeps=int(integ.get("electronic_substeps", 1)),
        record_stride=float(integ.get("record_stride_fs", 0.5)),
        z_start=float(samp.get("z_start_A", Z_START)),
        translational_width=float(samp.get("translational_width_invA2",
                                           TRANSLATIONAL_WIDTH)),
        burn_in=int(samp.get("burn_in", 1000)),
        thin=int(samp.get("thin", 50)),
        zpe=float(samp.get("zpe", 0.0)),
        nu_max=("auto" if obs.get("nu_max", "auto") == "auto"
                else int(obs["nu_max"])),
        plateau_fraction=float(obs.get("plateau_fraction", 0.2)),
        record_metal=bool(obs.get("record_metal", False)),
        metal_stride=float(obs.get("metal_stride_fs", 5.0)),
        mechanism_band=float(obs.get("mechanism_band_eV", 0.5)),
        checkpoint_interval=int(ckpt.get("interval", 250)),
        grid=GridSpec(
            r_min=float(grid.get("r_min_A", 0.9)),
            r_max=float(grid.get("r_max_A", 2.4)),
            n_points=int(grid.get("n_points", 75)),
        ),
    )


# ---------------------------------------------------------------------------
# deterministic seeding and file plumbing


def _traj_rng(seed, cell_index, traj_index):
    return np.random.default_rng(
        np.random.SeedSequence((seed, cell_index, 2, traj_index)))


def _chain_rng(seed, cell_index):
    return np.random.default_rng(np.random.SeedSequence((seed, cell_index, 1)))


def _fmt_e(e_i):
    return f"{e_i:g}"


def cell_dir(output_dir, nu_i, e_i) -> Path:
    return Path(output_dir) / f"nu_{nu_i}" / f"E_{_fmt_e(e_i)}"


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _atomic_savez(path: Path, **arrays):
    tmp = path.with_name(path.name + ".tmp.npz")
    with open(tmp, "wb") as fh:
        np.savez_compressed(fh, **arrays)
    os.replace(tmp, path)


def _config_hash(cfg: RunConfig, model_digest: str) -> str:
    payload = json.dumps({"config": cfg.as_dict(), "model": model_digest},
                         sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def _model_digest(model_file) -> str:
    with open(model_file, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------------
# batch execution


def _build_tables(params, grid, nu_list):
    es = morse_eigenstates(params, grid, n_states=max(nu_list) + 1)
    return {nu: build_wigner_table(es.psi[nu], es.r, nu) for nu in nu_list}


def _batch_payload(cfg: RunConfig, cell_index, e_i, batch_index, lo, hi,
                   vib_samples, vib_signs):
    return {
        "cfg": cfg, "cell_index": cell_index, "e_i": e_i,
        "batch_index": batch_index, "lo": lo, "hi": hi,
        "vib_samples": vib_samples, "vib_signs": vib_signs,
    }


def _run_batch(payload):
    """Worker body: assemble initial conditions, propagate, save checkpoint."""
    cfg: RunConfig = payload["cfg"]
    e_i = payload["e_i"]
    cell_index = payload["cell_index"]
    lo, hi = payload["lo"], payload["hi"]
    params = load_model(cfg.model_file)
    ctx = ModelContext.from_params(params)
    icfg = cfg.integrator_for(e_i, params)

    nb = hi - lo
    nlev = ctx.n_levels
    r = np.empty(nb)
    z = np.empty(nb)
    pr = np.empty(nb)
    pz = np.empty(nb)
    c = np.empty((nb, nlev), dtype=complex)
    ne = np.empty(nb)
    signs = np.asarray(payload["vib_signs"], dtype=float)
    samples = np.asarray(payload["vib_samples"], dtype=float)
    for j in range(nb):
        rng = _traj_rng(cfg.seed, cell_index, lo + j)
        ic = build_initial_condition(samples[j], signs[j], e_i, ctx, rng,
                                     z_start=cfg.z_start,
                                     width=cfg.translational_width,
                                     zpe=cfg.zpe)
        st = ic.state
        r[j], z[j], pr[j], pz[j] = st.r, st.z, st.pr, st.pz
        c[j] = st.x + 1j * st.p
        ne[j] = st.n_electrons

    res = propagate_batch(r, z, pr, pz, c, ne, ctx, icfg,
                          record_metal=cfg.record_metal,
                          metal_stride=cfg.metal_stride)
    out = {
        "lo": np.array(lo), "hi": np.array(hi),
        "times": res.times, "r": res.r, "z": res.z, "pr": res.pr,
        "pz": res.pz, "pop0": res.pop0, "above_mu": res.above_mu,
        "energy": res.energy, "max_drift": res.max_drift,
        "discard": res.discard, "n_electrons": res.n_electrons,
        "metal_start": res.metal_start, "metal_end": res.metal_end,
        "signs": signs,
    }
    if res.metal_pops is not None:
        out["metal_times"] = res.metal_times
        out["metal_pops"] = res.metal_pops
    return out


def _checkpoint_path(cdir: Path, batch_index: int) -> Path:
    return cdir / "checkpoints" / f"batch_{batch_index:04d}.npz"


def _run_batch_to_file(payload, cdir_str):
    out = _run_batch(payload)
    path = _checkpoint_path(Path(cdir_str), payload["batch_index"])
    _atomic_savez(path, **out)
    return payload["batch_index"]


# ---------------------------------------------------------------------------


def run_sweep(cfg: RunConfig, resume=False, force=False, max_batches=None,
              log=print):
    """Execute every (nu_i, E_i) cell of the run.

    Existing complete cells raise unless `resume` (skip/extend) or `force`
    (recompute) is given.  `max_batches` stops after that many new batches
    across the whole run (checkpoints survive; rerun with resume to finish).
    Returns {E_i: AggregateResult} for the cells that completed.
    """
    params = load_model(cfg.model_file)
    if coupling_decay(cfg.z_start, params) >= 1e-3:
        warnings.warn(
            f"molecule-metal coupling is not negligible at the starting "
            f"distance Z={cfg.z_start} A; vibrational sampling assumes an "
            f"isolated molecule", RuntimeWarning)
    nu_list = list(range(cfg.resolved_nu_max + 1))
    if cfg.nu_i not in nu_list:
        nu_list.append(cfg.nu_i)
    log(f"building Wigner tables for nu in {nu_list[0]}..{nu_list[-1]}")
    tables = _build_tables(params, cfg.grid, nu_list)
    model_digest = _model_digest(cfg.model_file)
    run_hash = _config_hash(cfg, model_digest)

    budget = [max_batches if max_batches is not None else -1]
    results = {}
    failed_cells = []
    for cell_index, e_i in enumerate(cfg.e_i_list):
        res = _run_cell(cfg, params, tables, nu_list, cell_index, e_i,
                        run_hash, model_digest, resume, force, budget, log)
        if res is not None:
            results[e_i] = res
        elif budget[0] == 0:
            log("batch budget exhausted; resume later to finish")
            break
        else:
            failed_cells.append(e_i)
    if failed_cells:
        raise SweepFailure(f"cells failed entirely: {failed_cells}")
    return results


def _run_cell(cfg, params, tables, nu_list, cell_index, e_i, run_hash,
              model_digest, resume, force, budget, log):
    cdir = cell_dir(cfg.output_dir, cfg.nu_i, e_i)
    final_csv = cdir / "final_states.csv"
    ckdir = cdir / "checkpoints"
    meta_path = ckdir / "meta.json"

    if final_csv.exists() and not resume and not force:
        raise RunError(
            f"output {final_csv} already exists (use resume or force)")
    if final_csv.exists() and resume:
        log(f"cell E={_fmt_e(e_i)}: already complete, skipping")
        return _load_final(cdir)
    ckdir.mkdir(parents=True, exist_ok=True)

    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("run_hash") != run_hash:
            if force:
                for old in ckdir.glob("batch_*.npz"):
                    old.unlink()
            else:
                raise RunError(
                    f"checkpoints in {ckdir} were written by a different "
                    f"configuration (use force to discard them)")
    _atomic_write(meta_path, json.dumps(
        {"run_hash": run_hash, "nu_i": cfg.nu_i, "E_i_eV": e_i},
        sort_keys=True, indent=2).encode())

    n = cfg.n_trajectories
    k = cfg.checkpoint_interval
    bounds = [(b * k, min(n, (b + 1) * k)) for b in range((n + k - 1) // k)]

    # the vibrational chain is cell-level: one walk, consumed in index order
    chain_rng = _chain_rng(cfg.seed, cell_index)
    samples, signs, chain_info = metropolis_sample_wigner(
        tables[cfg.nu_i], n, chain_rng, burn_in=cfg.burn_in, thin=cfg.thin)

    todo = []
    for bi, (lo, hi) in enumerate(bounds):
        if _checkpoint_path(cdir, bi).exists():
            continue
        todo.append(_batch_payload(cfg, cell_index, e_i, bi, lo, hi,
                                   samples[lo:hi], signs[lo:hi]))
    if budget[0] >= 0:
        todo = todo[:budget[0]]
        budget[0] -= len(todo)

    log(f"cell E={_fmt_e(e_i)}: {len(bounds)} batches "
        f"({len(bounds) - len(todo)} cached), {cfg.workers} worker(s)")
    failed_batches = {}
    if todo:
        if cfg.workers == 1:
            for payload in todo:
                try:
                    _run_batch_to_file(payload, str(cdir))
                except Exception as exc:  # isolate worker failures
                    failed_batches[payload["batch_index"]] = repr(exc)
        else:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                futs = {pool.submit(_run_batch_to_file, payload, str(cdir)):
                        payload for payload in todo}
                for fut, payload in futs.items():
                    try:
                        fut.result()
                    except Exception as exc:
                        failed_batches[payload["batch_index"]] = repr(exc)
    for bi, err in sorted(failed_batches.items()):
        warnings.warn(f"batch {bi} of cell E={_fmt_e(e_i)} failed: {err}",
                      RuntimeWarning)

    done = [bi for bi in range(len(bounds))
            if _checkpoint_path(cdir, bi).exists()]
    if len(done) + len(failed_batches) < len(bounds):
        return None  # budget stopped us; resumable
    if not done:
        return None  # complete failure of the cell

    icfg = cfg.integrator_for(e_i, params)
    ctx = ModelContext.from_params(params)
    acc = None
    pending_failed = 0
    for bi in range(len(bounds)):
        path = _checkpoint_path(cdir, bi)
        if not path.exists():
            lo, hi = bounds[bi]
            if acc is None:
                pending_failed += hi - lo
            else:
                acc.add_failed(hi - lo)
            continue
        with np.load(path) as data:
            batch = _batch_from_npz(data)
            if acc is None:
                acc = EnsembleAccumulator(
                    batch.times, tables, nu_list,
                    plateau_fraction=cfg.plateau_fraction, zpe=cfg.zpe,
                    ctx=ctx, mechanism_band=cfg.mechanism_band)
                acc.add_failed(pending_failed)
            acc.add_batch(batch, data["signs"])
    result = acc.finalize()

    _write_cell_outputs(cdir, cfg, e_i, result, chain_info, run_hash,
                        model_digest, icfg, params)
    log(f"cell E={_fmt_e(e_i)}: used {result.n_used}/{result.n_total}, "
        f"discards e={result.n_discarded_energy} b={result.n_discarded_bond} "
        f"f={result.n_failed}, worst drift {result.worst_energy_drift:.2e}")
    return result


def _batch_from_npz(data):
    from .propagate import BatchResult

    return BatchResult(
        times=data["times"], r=data["r"], z=data["z"], pr=data["pr"],
        pz=data["pz"], pop0=data["pop0"], above_mu=data["above_mu"],
        energy=data["energy"], max_drift=data["max_drift"],
        discard=data["discard"], n_electrons=data["n_electrons"],
        metal_start=data["metal_start"], metal_end=data["metal_end"],
        final_c=np.zeros((data["r"].shape[0], 1), dtype=complex),
        metal_times=data["metal_times"] if "metal_times" in data else None,
        metal_pops=data["metal_pops"] if "metal_pops" in data else None,
    )


def _fmt(value):
    return f"{value:.12g}"


def _series_csv(series) -> bytes:
    lines = ["time_fs,value,stderr"]
    for t, v, s in zip(series.times, series.values, series.stderr):
        lines.append(f"{_fmt(t)},{_fmt(v)},{_fmt(s)}")
    return ("\n".join(lines) + "\n").encode()


def _write_cell_outputs(cdir: Path, cfg: RunConfig, e_i,
                        result: AggregateResult, chain_info, run_hash,
                        model_digest, icfg, params):
    for name, series in result.series.items():
        _atomic_write(cdir / f"series_{name}.csv", _series_csv(series))

    lines = ["nu_f,probability,stderr"]
    for row in result.final_states:
        lines.append(f"{row['nu']},{_fmt(row['probability'])},"
                     f"{_fmt(row['stderr'])}")
    lines.append(f"leaked,{_fmt(result.leaked_probability)},"
                 f"{_fmt(result.leaked_stderr)}")
    _atomic_write(cdir / "final_states.csv",
                  ("\n".join(lines) + "\n").encode())

    if result.metal_series is not None:
        ml = ["time_fs,eps_eV,population"]
        times = result.metal_series["times"]
        eps = result.metal_series["eps"]
        pops = result.metal_series["populations"]
        for i, t in enumerate(times):
            for k, ek in enumerate(eps):
                ml.append(f"{_fmt(t)},{_fmt(ek)},{_fmt(pops[i, k])}")
        _atomic_write(cdir / "metal_fan.csv", ("\n".join(ml) + "\n").encode())

    if result.metal_delta is not None:
        ml = ["eps_eV,delta_population"]
        for ek, dk in zip(result.metal_eps, result.metal_delta):
            ml.append(f"{_fmt(ek)},{_fmt(dk)}")
        _atomic_write(cdir / "metal_delta.csv",
                      ("\n".join(ml) + "\n").encode())

    manifest = {
        "package_version": __version__,
        "run_hash": run_hash,
        "model_file": str(cfg.model_file),
        "model_sha256": model_digest,
        "seed": cfg.seed,
        "nu_i": cfg.nu_i,
        "E_i_eV": e_i,
        "n_trajectories": cfg.n_trajectories,
        "n_bath": params.n_bath,
        "t_max_fs": icfg.t_max,
        "dt_fs": icfg.dt,
        "config": cfg.as_dict(),
        "chain": chain_info,
        "counts": {
            "total": result.n_total,
            "used": result.n_used,
            "discarded_energy": result.n_discarded_energy,
            "discarded_bond": result.n_discarded_bond,
            "failed": result.n_failed,
        },
        "worst_energy_drift": result.worst_energy_drift,
        "plateau_window_fs": list(result.plateau_window),
        "diagnostics": result.diagnostics,
    }
    _atomic_write(cdir / "manifest.json",
                  (json.dumps(manifest, sort_keys=True, indent=2) + "\n")
                  .encode())


@dataclass
class CompletedCell:
    """On-disk view of a finished cell (what resume hands back)."""

    final_states: list
    manifest: dict


def _load_final(cdir: Path) -> CompletedCell:
    rows = []
    with open(cdir / "final_states.csv") as fh:
        next(fh)
        for line in fh:
            nu, prob, err = line.strip().split(",")
            if nu == "leaked":
                continue
            rows.append({"nu": int(nu), "probability": float(prob),
                         "stderr": float(err)})
    manifest = json.loads((cdir / "manifest.json").read_text())
    return CompletedCell(final_states=rows, manifest=manifest)


# ---------------------------------------------------------------------------


def convergence_report(cfg: RunConfig, axis: str, values, log=print):
    """Rerun the sweep along one convergence axis and difference the results.

    axis: "N" (band size), "n_trajectories", or "dt".  Returns rows with the
    max |change| of the final-state probabilities between successive axis
    values; for the band axis the anchored ground-energy spread on the
    calibration slices is included as well.
    """
    if axis not in ("N", "n_trajectories", "dt"):
        raise RunError(f"unknown convergence axis {axis!r}")
    values = list(values)
    if len(values) < 2:
        raise RunError("need at least two axis values")
    params = load_model(cfg.model_file)

    tables_by_value = {}
    for v in values:
        sub = dataclasses.replace(
            cfg, output_dir=str(Path(cfg.output_dir) / f"conv_{axis}_{v:g}"))
        if axis == "n_trajectories":
            sub = dataclasses.replace(sub, n_trajectories=int(v))
        elif axis == "dt":
            sub = dataclasses.replace(sub, dt=float(v))
        else:
            model = load_model(cfg.model_file).replace(n_bath=int(v))
            tmp_model = Path(cfg.output_dir) / f"conv_model_N{int(v)}.yaml"
            tmp_model.parent.mkdir(parents=True, exist_ok=True)
            from .model import save_model

            save_model(model, tmp_model)
            sub = dataclasses.replace(sub, model_file=str(tmp_model))
        log(f"convergence {axis}={v:g}")
        results = run_sweep(sub, resume=True, log=log)
        tables_by_value[v] = {
            e: {row["nu"]: row["probability"]
                for row in results[e].final_states}
            for e in results
        }

    rows = []
    for prev, cur in zip(values[:-1], values[1:]):
        deltas = []
        for e in tables_by_value[cur]:
            for nu, prob in tables_by_value[cur][e].items():
                deltas.append(abs(prob - tables_by_value[prev][e].get(nu, 0.0)))
        rows.append({"axis": axis, "from": prev, "to": cur,
                     "max_final_state_change": max(deltas)})
    report = {"axis": axis, "values": values, "rows": rows}
    if axis == "N":
        report["ground_energy_convergence"] = band_convergence_table(
            params, band_sizes=[int(v) for v in values])
    return report
