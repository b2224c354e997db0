"""Post-processing of finished runs into tidy, plot-ready CSV files.

Everything here reads the per-cell outputs written by the ensemble runner
(series CSVs, final-state tables, manifests) and reshapes them; the only
physics evaluation is the charge-transfer-gap grid export, which recomputes
the gap directly from the model file named in the manifests.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .model import gap, load_model

__all__ = [
    "AnalysisError",
    "find_cells",
    "read_final_states",
    "read_series",
    "survival_table",
    "distribution_table",
    "mechanism_traces",
    "gap_grid",
    "write_rows",
]


class AnalysisError(RuntimeError):
    pass


def find_cells(output_dir):
    """All finished cells under a run directory, sorted by (nu_i, E_i)."""
    root = Path(output_dir)
    if not root.is_dir():
        raise AnalysisError(f"output directory {root} does not exist")
    cells = []
    for manifest_path in sorted(root.glob("nu_*/E_*/manifest.json")):
        manifest = json.loads(manifest_path.read_text())
        cells.append({
            "dir": manifest_path.parent,
            "nu_i": manifest["nu_i"],
            "e_i": manifest["E_i_eV"],
            "manifest": manifest,
        })
    if not cells:
        raise AnalysisError(
            f"no finished cells (manifest.json) found under {root}")
    cells.sort(key=lambda c: (c["nu_i"], c["e_i"]))
    return cells


def read_final_states(cell_dir):
    rows = []
    leaked = None
    with open(Path(cell_dir) / "final_states.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            if row["nu_f"] == "leaked":
                leaked = (float(row["probability"]), float(row["stderr"]))
            else:
                rows.append((int(row["nu_f"]), float(row["probability"]),
                             float(row["stderr"])))
    return rows, leaked


def read_series(cell_dir, name):
    path = Path(cell_dir) / f"series_{name}.csv"
    if not path.exists():
        raise AnalysisError(f"missing series file {path}")
    data = np.genfromtxt(path, delimiter=",", names=True)
    return data["time_fs"], data["value"], data["stderr"]


def survival_table(cells):
    """Rows (nu_f, E_i, probability, stderr) across the run's cells."""
    rows = []
    for cell in cells:
        for nu, prob, err in read_final_states(cell["dir"])[0]:
            rows.append({"nu_f": nu, "E_i_eV": cell["e_i"],
                         "probability": prob, "stderr": err})
    rows.sort(key=lambda r: (r["nu_f"], r["E_i_eV"]))
    return rows


def distribution_table(cells):
    """Rows (nu_i, E_i, nu_f, probability, stderr) for distribution plots."""
    rows = []
    for cell in cells:
        for nu, prob, err in read_final_states(cell["dir"])[0]:
            rows.append({"nu_i": cell["nu_i"], "E_i_eV": cell["e_i"],
                         "nu_f": nu, "probability": prob, "stderr": err})
    return rows


def mechanism_traces(cells):
    """Rows (E_i, time, mean bond length, mean surface distance)."""
    rows = []
    for cell in cells:
        t, r_mean, _ = read_series(cell["dir"], "bond_length")
        _, z_mean, _ = read_series(cell["dir"], "surface_distance")
        for ti, ri, zi in zip(t, r_mean, z_mean):
            rows.append({"E_i_eV": cell["e_i"], "time_fs": ti,
                         "mean_R_A": ri, "mean_Z_A": zi})
    return rows


def gap_grid(model_file, r_range=(0.9, 2.4), z_range=(0.8, 5.0),
             n_r=60, n_z=80):
    """Charge-transfer-gap surface on a rectangular grid (direct evaluation)."""
    params = load_model(model_file)
    r = np.linspace(*r_range, n_r)
    z = np.linspace(*z_range, n_z)
    rows = []
    for zi in z:
        g = gap(r, zi, params)
        for ri, gi in zip(r, g):
            rows.append({"R_A": ri, "Z_A": zi, "gap_eV": gi})
    return rows


def write_rows(rows, path, columns):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])
    tmp.replace(path)


def _fmt(v):
    # repr of a builtin float round-trips exactly, so derived CSVs can be
    # checked against direct re-evaluation at full precision
    if isinstance(v, float):
        return repr(float(v))
    return v


def export_figure_data(output_dir, dest_dir=None):
    """Write the standard set of plot-ready CSVs for a finished run.

    Returns the list of files written.  The metal fan CSV is copied through
    from cells that recorded metal populations.
    """
    cells = find_cells(output_dir)
    dest = Path(dest_dir) if dest_dir else Path(output_dir) / "figures_data"
    dest.mkdir(parents=True, exist_ok=True)
    written = []

    write_rows(survival_table(cells), dest / "survival.csv",
               ["nu_f", "E_i_eV", "probability", "stderr"])
    written.append(dest / "survival.csv")

    write_rows(distribution_table(cells), dest / "distributions.csv",
               ["nu_i", "E_i_eV", "nu_f", "probability", "stderr"])
    written.append(dest / "distributions.csv")

    write_rows(mechanism_traces(cells), dest / "mechanism_trace.csv",
               ["E_i_eV", "time_fs", "mean_R_A", "mean_Z_A"])
    written.append(dest / "mechanism_trace.csv")

    model_file = cells[0]["manifest"]["model_file"]
    write_rows(gap_grid(model_file), dest / "contour_grid.csv",
               ["R_A", "Z_A", "gap_eV"])
    written.append(dest / "contour_grid.csv")

    # per-cell time series for population plots
    pop_rows = []
    for cell in cells:
        t, v, s = read_series(cell["dir"], "anion_population")
        for ti, vi, si in zip(t, v, s):
            pop_rows.append({"series": f"E={cell['e_i']:g} eV",
                             "time_fs": ti, "value": vi, "stderr": si})
    write_rows(pop_rows, dest / "anion_population_timeseries.csv",
               ["series", "time_fs", "value", "stderr"])
    written.append(dest / "anion_population_timeseries.csv")

    z_rows = []
    for cell in cells:
        t, v, s = read_series(cell["dir"], "surface_distance")
        for ti, vi, si in zip(t, v, s):
            z_rows.append({"series": f"E={cell['e_i']:g} eV",
                           "time_fs": ti, "value": vi, "stderr": si})
    write_rows(z_rows, dest / "surface_distance_timeseries.csv",
               ["series", "time_fs", "value", "stderr"])
    written.append(dest / "surface_distance_timeseries.csv")

    for cell in cells:
        fan = Path(cell["dir"]) / "metal_fan.csv"
        if fan.exists():
            target = dest / f"metal_fan_nu{cell['nu_i']}_E{cell['e_i']:g}.csv"
            target.write_bytes(fan.read_bytes())
            written.append(target)
    return written
