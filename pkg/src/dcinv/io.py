"""File formats: datasets (npz), model rasters (text), CSV tables, metadata.

Everything written here must parse back to the in-memory values exactly;
floats go through repr-faithful formatting.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .completion import CompletionEntry
from .forward import ExperimentSet
from .grid import build_grid


def emit_model_raster(sigma_cells: np.ndarray, path) -> None:
    """Write a cell raster as log-conductivity text.

    Line 1: ``dim n1 n2 [n3]``; then one row-major cell value of log(sigma)
    per line with 17 significant digits (exact float64 round trip).
    """
    sigma_cells = np.asarray(sigma_cells, dtype=float)
    if sigma_cells.ndim not in (2, 3):
        raise ValueError("raster must be shaped like the grid cells (2D or 3D)")
    if not np.all(np.isfinite(sigma_cells)) or np.any(sigma_cells <= 0):
        raise ValueError("raster values must be finite and positive")
    header = f"{sigma_cells.ndim} " + " ".join(str(n) for n in sigma_cells.shape)
    lines = [header]
    lines.extend(f"{v:.17g}" for v in np.log(sigma_cells).ravel())
    Path(path).write_text("\n".join(lines) + "\n")


def read_model_raster(path) -> np.ndarray:
    """Read a raster written by :func:`emit_model_raster`; returns sigma."""
    lines = Path(path).read_text().splitlines()
    head = lines[0].split()
    dim = int(head[0])
    shape = tuple(int(x) for x in head[1 : 1 + dim])
    vals = np.array([float(x) for x in lines[1 : 1 + int(np.prod(shape))]])
    if vals.size != int(np.prod(shape)):
        raise ValueError(f"raster file {path} is truncated")
    return np.exp(vals).reshape(shape)


def save_dataset(path, spec_echo: dict, experiments: ExperimentSet,
                 noisy_full: np.ndarray, mask: np.ndarray,
                 sigma_true_coarse: np.ndarray) -> None:
    """Serialize a generated dataset (original, post-knockout) to npz."""
    grid = experiments.grid
    np.savez_compressed(
        path,
        spec_json=np.array(json.dumps(spec_echo, sort_keys=True)),
        dim=grid.dim,
        n=grid.n_cells_per_axis[0],
        src_nodes=experiments.src_nodes,
        snk_nodes=experiments.snk_nodes,
        lam_union=experiments.lam_union,
        noisy_full=noisy_full,
        mask=mask,
        eta=experiments.eta,
        sd=experiments.sd if experiments.sd is not None else np.nan,
        sigma_true_coarse=sigma_true_coarse,
    )


def load_dataset(path):
    """Rebuild (spec_echo, ExperimentSet, noisy_full, mask, sigma_true)."""
    with np.load(path, allow_pickle=False) as z:
        spec_echo = json.loads(str(z["spec_json"]))
        grid = build_grid(int(z["dim"]), int(z["n"]))
        lam = z["lam_union"]
        mask = z["mask"]
        noisy = z["noisy_full"]
        sd = float(z["sd"])
        receivers = [lam[mask[:, i]] for i in range(mask.shape[1])]
        data = [noisy[mask[:, i], i] for i in range(mask.shape[1])]
        experiments = ExperimentSet(
            grid=grid,
            src_nodes=z["src_nodes"],
            snk_nodes=z["snk_nodes"],
            receivers=receivers,
            data=data,
            lam_union=lam,
            eta=z["eta"],
            sd=None if np.isnan(sd) else sd,
        )
        return spec_echo, experiments, noisy, mask, z["sigma_true_coarse"]


def save_completed(path, experiments: ExperimentSet, rho_factor: float) -> None:
    """Serialize a completed (shared-receiver) dataset to npz."""
    if not experiments.shared_receivers:
        raise ValueError("completed dataset must have shared receivers")
    grid = experiments.grid
    np.savez_compressed(
        path,
        dim=grid.dim,
        n=grid.n_cells_per_axis[0],
        src_nodes=experiments.src_nodes,
        snk_nodes=experiments.snk_nodes,
        lam_union=experiments.lam_union,
        data=experiments.data_matrix(),
        eta=experiments.eta,
        sd=experiments.sd if experiments.sd is not None else np.nan,
        completed_fraction=experiments.completed_fraction,
        rho_factor=rho_factor,
    )


def load_completed(path):
    """Rebuild (ExperimentSet, rho_factor) from :func:`save_completed` output."""
    with np.load(path, allow_pickle=False) as z:
        grid = build_grid(int(z["dim"]), int(z["n"]))
        lam = z["lam_union"]
        D = z["data"]
        s = D.shape[1]
        sd = float(z["sd"])
        experiments = ExperimentSet(
            grid=grid,
            src_nodes=z["src_nodes"],
            snk_nodes=z["snk_nodes"],
            receivers=[lam.copy() for _ in range(s)],
            data=[D[:, i] for i in range(s)],
            lam_union=lam,
            eta=z["eta"],
            sd=None if np.isnan(sd) else sd,
            completed_fraction=float(z["completed_fraction"]),
        )
        return experiments, float(z["rho_factor"])


def write_completion_csv(entries: list[CompletionEntry], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["exp_id", "lambda", "residual", "eta", "flagged"])
        for e in entries:
            writer.writerow([e.exp_id, e.lam, e.residual, e.eta, int(e.flagged)])


def read_completion_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append({
                "exp_id": int(row["exp_id"]),
                "lambda": float(row["lambda"]),
                "residual": float(row["residual"]),
                "eta": float(row["eta"]),
                "flagged": bool(int(row["flagged"])),
            })
    return out


def write_misfit_table(rows: list[tuple], path) -> None:
    """Plot-ready data-misfit-vs-work table: iter, cum_solves, misfit."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "cum_solves", "misfit"])
        for row in rows:
            writer.writerow(list(row))


def read_misfit_table(path) -> list[tuple]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append((int(row["iter"]), int(row["cum_solves"]), float(row["misfit"])))
    return out


def write_json(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())
