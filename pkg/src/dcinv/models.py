"""Piecewise-constant ground-truth conductivity models.

All models place axis-aligned conductive targets (sigma_target) in a
uniform background (sigma_background). The 2D two-blob model comes in two
flavours: blobs touching the top/bottom measurement boundaries (field
kinks reach the receivers, gradient-kind completion territory) or blobs
held away from them (smooth boundary field, Laplacian-kind completion).
"""

from __future__ import annotations

import numpy as np

from .grid import Grid

MODEL_IDS = ("two-blobs-2d", "block-3d", "deep-block-3d", "background", "custom")


def _boxes_for(model: str, contact: bool) -> list[tuple]:
    if model == "two-blobs-2d":
        if contact:
            return [
                ((0.20, 0.70), (0.35, 1.00)),
                ((0.60, 0.00), (0.80, 0.30)),
            ]
        return [
            ((0.20, 0.55), (0.35, 0.85)),
            ((0.60, 0.15), (0.80, 0.45)),
        ]
    if model == "block-3d":
        # shallow box reaching the measurement surface plus a deeper one
        return [
            ((0.30, 0.30, 0.65), (0.60, 0.60, 1.00)),
            ((0.55, 0.55, 0.15), (0.80, 0.80, 0.40)),
        ]
    if model == "deep-block-3d":
        return [((0.30, 0.30, 0.25), (0.70, 0.70, 0.55))]
    raise ValueError(f"unknown model id {model!r}")


def make_true_model(
    grid: Grid,
    model: str,
    sigma_target: float = 1.0,
    sigma_background: float = 0.1,
    contact: bool = True,
    raster: np.ndarray | None = None,
) -> np.ndarray:
    """Per-cell true conductivity on the given grid.

    ``custom`` takes a caller-provided raster (must match the grid).
    """
    if sigma_target <= 0 or sigma_background <= 0:
        raise ValueError("conductivity levels must be positive")
    if sigma_target <= sigma_background:
        raise ValueError("target conductivity must exceed the background")
    if model == "custom":
        if raster is None:
            raise ValueError("custom model requires a raster")
        raster = np.asarray(raster, dtype=float).ravel()
        if raster.size != grid.n_cells:
            raise ValueError(
                f"raster has {raster.size} cells, grid has {grid.n_cells}"
            )
        return raster.copy()
    if model == "background":
        return np.full(grid.n_cells, sigma_background)
    boxes = _boxes_for(model, contact)
    for (lo, hi) in boxes:
        if len(lo) != grid.dim:
            raise ValueError(f"model {model!r} is {len(lo)}D, grid is {grid.dim}D")
    centers = grid.cell_centers()
    sigma = np.full(grid.n_cells, sigma_background)
    for lo, hi in boxes:
        inside = np.ones(grid.n_cells, dtype=bool)
        for ax in range(grid.dim):
            inside &= (centers[:, ax] >= lo[ax]) & (centers[:, ax] <= hi[ax])
        sigma[inside] = sigma_target
    return sigma
