"""Boundary data completion: extend each experiment's data to the union
receiver set by Tikhonov-regularized least squares on boundary patches.

Per smooth boundary segment a patch is built spanning the receivers there,
and per experiment the measured values are approximated by a function v
minimizing 1/2 ||v|Lam_i - d_i||^2 + lambda ||L v||^2, where L penalizes
either the surface gradient (fields that are merely continuous across
conductivity jumps reaching the boundary) or the surface Laplacian
(smooth fields, jumps away from the boundary). The weight lambda is picked
by the discrepancy principle against the known per-experiment noise level.
Completed data is the exact restriction of v to the union receiver set.

Everything here is deterministic: no randomness enters completion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .forward import ExperimentSet
from .grid import Grid, segment_interior_nodes

COMPLETION_KINDS = ("gradient", "laplacian")

LAMBDA_LOG_RANGE = (-12.0, 4.0)
LAMBDA_BISECT_STEPS = 60
DISCREPANCY_RTOL = 0.01


class CompletionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Patch:
    """Contiguous node patch on one boundary segment (the completion domain)."""

    segment_id: str
    node_ids: np.ndarray  # global node ids, lattice order (ascending)
    coords: np.ndarray  # segment-local coordinates, (m,) or (m, 2)
    spacing: float
    lattice_shape: tuple[int, ...]  # (m,) for edges, (m1, m2) for faces

    @property
    def size(self) -> int:
        return self.node_ids.size

    def locate(self, global_ids: np.ndarray) -> np.ndarray:
        """Patch-local indices of the given global node ids."""
        pos = np.searchsorted(self.node_ids, global_ids)
        ok = (pos < self.size) & (self.node_ids[np.minimum(pos, self.size - 1)] == global_ids)
        if not np.all(ok):
            missing = np.asarray(global_ids)[~ok]
            raise CompletionError(f"nodes {missing.tolist()} are outside patch {self.segment_id}")
        return pos


@dataclass(frozen=True)
class SurfaceOperator:
    """Discrete surface gradient or Laplacian on a patch."""

    segment_id: str
    kind: str
    matrix: sp.csr_matrix


@dataclass
class CompletionEntry:
    """Completion of one experiment on one patch."""

    exp_id: int
    segment_id: str
    v: np.ndarray  # values on all patch nodes
    lam: float
    residual: float  # ||v|Lam_i - d_i||^2 at the accepted lambda
    eta: float
    flagged: bool


@dataclass
class CompletionResult:
    experiments: ExperimentSet  # shared-receiver set with completed data
    missing_fraction: float  # c: fraction of union entries that were filled
    rho_factor: float  # 1 + c, the stopping-tolerance inflation
    entries: list[CompletionEntry]


def build_patch(experiments: ExperimentSet, grid: Grid, mode: str = "hull") -> dict[str, Patch]:
    """Patches per boundary segment covering the union receiver set.

    ``hull`` spans the receiver hull on each segment (a contiguous index
    range on edges, a bounding rectangle on faces); ``full_segment`` takes
    the whole segment interior. Corners are never included.
    """
    if mode not in ("hull", "full_segment"):
        raise ValueError(f"unknown patch mode {mode!r}")
    lam = experiments.lam_union
    if lam.size == 0:
        raise CompletionError("empty union receiver set")
    corner_hits = np.intersect1d(lam, grid.corner_node_ids())
    if corner_hits.size:
        raise CompletionError(f"receivers sit on domain corners: {corner_hits.tolist()}")

    patches: dict[str, Patch] = {}
    claimed = np.zeros(lam.size, dtype=bool)
    for seg_id in sorted(grid.segments):
        seg = grid.segments[seg_id]
        interior = segment_interior_nodes(grid, seg)
        on_seg = np.isin(lam, interior)
        if not np.any(on_seg):
            continue
        claimed |= on_seg
        # ordinals of receiver nodes within the full segment lattice
        ordinals = np.searchsorted(seg.node_indices, lam[on_seg])
        if grid.dim == 2:
            m = seg.node_indices.size
            lo, hi = (1, m - 2) if mode == "full_segment" else (int(ordinals.min()), int(ordinals.max()))
            if lo < 1 or hi > m - 2:
                raise CompletionError(f"patch on segment {seg_id} would include a corner")
            sel = np.arange(lo, hi + 1)
            lattice_shape: tuple[int, ...] = (sel.size,)
        else:
            m = int(np.sqrt(seg.node_indices.size))
            r, c = np.divmod(ordinals, m)
            if mode == "full_segment":
                r0, r1, c0, c1 = 1, m - 2, 1, m - 2
            else:
                r0, r1, c0, c1 = int(r.min()), int(r.max()), int(c.min()), int(c.max())
            if r0 < 1 or c0 < 1 or r1 > m - 2 or c1 > m - 2:
                raise CompletionError(f"patch on face {seg_id} would touch the face boundary")
            rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
            sel = (rr * m + cc).ravel()
            lattice_shape = (r1 - r0 + 1, c1 - c0 + 1)
        node_ids = seg.node_indices[sel]
        if not np.all(np.diff(node_ids) > 0):
            raise CompletionError(f"segment {seg_id} nodes are not id-ordered")
        patches[seg_id] = Patch(
            segment_id=seg_id,
            node_ids=node_ids,
            coords=seg.local_coords[sel],
            spacing=seg.spacing,
            lattice_shape=lattice_shape,
        )
    if not np.all(claimed):
        stray = lam[~claimed]
        raise CompletionError(
            f"receivers {stray.tolist()} are not interior to any boundary segment"
        )
    return patches


def surface_operator(patch: Patch, kind: str) -> SurfaceOperator:
    """Discretized surface gradient or Laplacian over the patch nodes.

    Row scalings approximate the L2 integral norms. The gradient operator
    annihilates constants; the Laplacian operator (axis-wise second
    differences) annihilates all segment-affine functions.
    """
    if kind not in COMPLETION_KINDS:
        raise ValueError(f"unknown completion kind {kind!r}")
    h = patch.spacing
    if len(patch.lattice_shape) == 1:
        (m,) = patch.lattice_shape
        if kind == "gradient":
            if m < 2:
                raise CompletionError(f"patch {patch.segment_id} too small for gradient rows")
            L = sp.diags([-1.0, 1.0], [0, 1], shape=(m - 1, m)) / np.sqrt(h)
        else:
            if m < 3:
                raise CompletionError(f"patch {patch.segment_id} too small for Laplacian rows")
            L = sp.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(m - 2, m)) / h**1.5
        return SurfaceOperator(patch.segment_id, kind, L.tocsr())

    m1, m2 = patch.lattice_shape
    idx = np.arange(m1 * m2).reshape(m1, m2)
    rows, cols, vals = [], [], []
    row0 = 0

    def add_rows(stencil_nodes, stencil_vals):
        nonlocal row0
        nrows = stencil_nodes[0].size
        for nodes, val in zip(stencil_nodes, stencil_vals):
            rows.append(np.arange(row0, row0 + nrows))
            cols.append(nodes.ravel())
            vals.append(np.full(nrows, val))
        row0 += nrows

    if kind == "gradient":
        scale = 1.0  # sqrt(h^2) * (1/h)
        add_rows((idx[:-1, :], idx[1:, :]), (-scale, scale))
        add_rows((idx[:, :-1], idx[:, 1:]), (-scale, scale))
    else:
        scale = 1.0 / h  # sqrt(h^2) * (1/h^2)
        if m1 >= 3:
            add_rows((idx[:-2, :], idx[1:-1, :], idx[2:, :]), (scale, -2 * scale, scale))
        if m2 >= 3:
            add_rows((idx[:, :-2], idx[:, 1:-1], idx[:, 2:]), (scale, -2 * scale, scale))
        if row0 == 0:
            raise CompletionError(f"patch {patch.segment_id} too small for Laplacian rows")
    L = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(row0, m1 * m2),
    )
    return SurfaceOperator(patch.segment_id, kind, L)


class _PatchRidge:
    """Solver for (P^T P + 2 lambda L^T L) v = P^T d on one patch."""

    def __init__(self, patch: Patch, kind: str):
        self.patch = patch
        self.kind = kind
        L = surface_operator(patch, kind).matrix
        self.ltl2 = 2.0 * (L.T @ L).toarray()

    def solve(self, lam: float, lam_local: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, float]:
        m = self.patch.size
        M = lam * self.ltl2
        M[lam_local, lam_local] += 1.0
        rhs = np.zeros(m)
        rhs[lam_local] = d
        try:
            v = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError as exc:
            raise CompletionError(
                f"singular completion system on patch {self.patch.segment_id} "
                f"at lambda={lam:g}: {exc}"
            ) from None
        r = v[lam_local] - d
        return v, float(np.dot(r, r))


def choose_lambda(
    d_i: np.ndarray,
    lam_local: np.ndarray,
    patch: Patch,
    kind: str,
    eta_i: float,
    _ridge: _PatchRidge | None = None,
) -> tuple[float, bool]:
    """Regularization weight with residual matching eta_i to 1% relative.

    Bisection on log10(lambda) over [-12, 4]. When the target is outside
    the attainable residual range the boundary lambda is returned with the
    flag set (e.g. eta at or above the residual ceiling: maximal smoothing
    already suffices).
    """
    if eta_i <= 0.0:
        raise ValueError(f"noise level must be positive, got {eta_i}")
    ridge = _ridge if _ridge is not None else _PatchRidge(patch, kind)
    lo, hi = LAMBDA_LOG_RANGE
    _, r_lo = ridge.solve(10.0**lo, lam_local, d_i)
    _, r_hi = ridge.solve(10.0**hi, lam_local, d_i)
    if eta_i >= r_hi:
        return 10.0**hi, True
    if eta_i <= r_lo:
        return 10.0**lo, True
    mid = 0.5 * (lo + hi)
    for _ in range(LAMBDA_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        _, r_mid = ridge.solve(10.0**mid, lam_local, d_i)
        if abs(r_mid - eta_i) <= DISCREPANCY_RTOL * eta_i:
            return 10.0**mid, False
        if r_mid > eta_i:
            hi = mid
        else:
            lo = mid
    return 10.0**mid, True


def complete_one(
    d_i: np.ndarray,
    lam_local: np.ndarray,
    patch: Patch,
    kind: str,
    eta_i: float,
    _ridge: _PatchRidge | None = None,
) -> CompletionEntry:
    """Complete one experiment's data on one patch.

    ``lam_local`` holds the patch-local indices where ``d_i`` was measured.
    """
    d_i = np.asarray(d_i, dtype=float)
    lam_local = np.asarray(lam_local, dtype=int)
    if lam_local.size != d_i.size:
        raise ValueError("data and receiver index lengths differ")
    if lam_local.size < 2:
        raise CompletionError(
            f"need at least 2 receivers on patch {patch.segment_id}, got {lam_local.size}"
        )
    ridge = _ridge if _ridge is not None else _PatchRidge(patch, kind)
    lam, flagged = choose_lambda(d_i, lam_local, patch, kind, eta_i, _ridge=ridge)
    v, residual = ridge.solve(lam, lam_local, d_i)
    return CompletionEntry(
        exp_id=-1,
        segment_id=patch.segment_id,
        v=v,
        lam=lam,
        residual=residual,
        eta=eta_i,
        flagged=flagged,
    )


def complete_all(
    experiments: ExperimentSet,
    kind: str,
    etas: np.ndarray | None = None,
    mode: str = "hull",
) -> CompletionResult:
    """Extend every experiment's data to the union receiver set.

    Experiments are completed independently (patch by patch); the completed
    value at a union node is the exact restriction of the fitted function.
    Noise levels per experiment come from ``etas`` or, by default, from the
    recorded generator standard deviation as |Lam_i| * sd^2.

    Returns the shared-receiver experiment set, the missing-data fraction c
    and the stopping-tolerance inflation factor 1 + c.
    """
    if kind not in COMPLETION_KINDS:
        raise ValueError(f"unknown completion kind {kind!r}")
    grid = experiments.grid
    s = experiments.n_experiments
    lam_union = experiments.lam_union
    patches = build_patch(experiments, grid, mode=mode)
    ridges = {seg_id: _PatchRidge(p, kind) for seg_id, p in sorted(patches.items())}

    if etas is None:
        if experiments.sd is None:
            raise CompletionError("no per-experiment noise levels and no recorded sd")
        sd2 = experiments.sd**2
        etas = np.array([r.size * sd2 for r in experiments.receivers])
    else:
        etas = np.asarray(etas, dtype=float)
        if etas.shape != (s,):
            raise ValueError(f"expected {s} noise levels, got shape {etas.shape}")

    # union positions per patch, for assembling completed vectors
    union_pos = {
        seg_id: (np.flatnonzero(np.isin(lam_union, p.node_ids)), p)
        for seg_id, p in patches.items()
    }

    new_data: list[np.ndarray] = []
    entries: list[CompletionEntry] = []
    failures: list[tuple[int, Exception]] = []
    missing_total = 0
    for i in range(s):
        ri, di = experiments.receivers[i], experiments.data[i]
        missing_total += lam_union.size - ri.size
        d_tilde = np.empty(lam_union.size)
        exp_entries = []
        try:
            for seg_id in sorted(patches):
                patch = patches[seg_id]
                on_patch = np.isin(ri, patch.node_ids)
                n_here = int(on_patch.sum())
                eta_here = etas[i] * n_here / ri.size
                entry = complete_one(
                    di[on_patch], patch.locate(ri[on_patch]), patch, kind, eta_here,
                    _ridge=ridges[seg_id],
                )
                entry.exp_id = i
                exp_entries.append(entry)
                pos, _ = union_pos[seg_id]
                d_tilde[pos] = entry.v[patch.locate(lam_union[pos])]
        except (CompletionError, ValueError) as exc:
            failures.append((i, exc))
            continue
        # move the extension into the union measurement gauge: the shared
        # projection has zero row sums over the union set, so the completed
        # data must be mean-free there (the same convention the original
        # data followed on its own receiver set)
        shift = d_tilde.mean()
        d_tilde -= shift
        for entry in exp_entries:
            entry.v = entry.v - shift
        entries.extend(exp_entries)
        new_data.append(d_tilde)

    if failures:
        detail = "; ".join(f"experiment {i}: {exc}" for i, exc in failures)
        raise CompletionError(f"completion failed for {len(failures)} experiment(s): {detail}")

    c = missing_total / (s * lam_union.size)
    completed = ExperimentSet(
        grid=grid,
        src_nodes=experiments.src_nodes.copy(),
        snk_nodes=experiments.snk_nodes.copy(),
        receivers=[lam_union.copy() for _ in range(s)],
        data=new_data,
        lam_union=lam_union.copy(),
        eta=etas.copy(),
        sd=experiments.sd,
        completed_fraction=c,
    )
    return CompletionResult(
        experiments=completed,
        missing_fraction=c,
        rho_factor=1.0 + c,
        entries=entries,
    )
