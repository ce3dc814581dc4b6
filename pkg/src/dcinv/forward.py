"""Discrete forward model for div(sigma grad u) = q with Neumann walls.

The operator is a vertex-centered finite-volume discretization assembled
as Inc^T diag(g) Inc, where Inc is the edge-node incidence matrix and g
holds per-edge conductances (harmonic mean of the adjacent cell
conductivities, scaled by the dual-face fraction inside the domain). This
guarantees symmetry, positive semidefiniteness, zero row sums, and
nonpositive off-diagonals by construction. The constant null space of the
pure-Neumann problem is handled by solving in the mean-zero subspace; no
node is pinned.

Every linear solve against the operator (or its transpose, which is the
same matrix) passes through :func:`solve` / :func:`solve_many` and ticks a
:class:`SolveCounter` exactly once per right-hand side, which is the unit
of work all efficiency comparisons are expressed in.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from itertools import product

import numpy as np
import scipy.sparse as sp

from .grid import Grid, segment_interior_nodes


class SolverError(RuntimeError):
    """Linear solve failed; carries the worst relative residual seen."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class SolveCounter:
    """Cumulative count of linear-system solves, exact under threading."""

    def __init__(self):
        self._count = 0
        self._lock = threading.Lock()

    @property
    def count(self) -> int:
        return self._count

    def add(self, n: int = 1) -> None:
        if n < 0:
            raise ValueError("count increments must be nonnegative")
        with self._lock:
            self._count += n


# Static per-grid edge structure, shared by every assembly on that grid.
_EDGE_CACHE: dict[tuple[int, tuple[int, ...]], dict] = {}


def _edge_structure(grid: Grid) -> dict:
    key = (grid.dim, grid.n_cells_per_axis)
    if key in _EDGE_CACHE:
        return _EDGE_CACHE[key]

    dim = grid.dim
    node_shape = grid.node_shape
    cell_shape = grid.cell_shape

    a_nodes, b_nodes = [], []
    pair_edge, pair_cell = [], []
    edge_offset = 0
    for ax in range(dim):
        ranges = [
            np.arange(cell_shape[a]) if a == ax else np.arange(node_shape[a])
            for a in range(dim)
        ]
        mesh = np.meshgrid(*ranges, indexing="ij")
        multi = [m.ravel() for m in mesh]
        n_edges_ax = multi[0].size

        multi_b = list(multi)
        multi_b[ax] = multi[ax] + 1
        a_nodes.append(np.ravel_multi_index(tuple(multi), node_shape))
        b_nodes.append(np.ravel_multi_index(tuple(multi_b), node_shape))

        other_axes = [a for a in range(dim) if a != ax]
        local_edge = np.arange(n_edges_ax) + edge_offset
        for offsets in product((-1, 0), repeat=dim - 1):
            cell_multi = [None] * dim
            cell_multi[ax] = multi[ax]
            valid = np.ones(n_edges_ax, dtype=bool)
            for a, off in zip(other_axes, offsets):
                idx = multi[a] + off
                valid &= (idx >= 0) & (idx < cell_shape[a])
                cell_multi[a] = idx
            cell_multi = [np.where(valid, cm, 0) for cm in cell_multi]
            cells = np.ravel_multi_index(tuple(cell_multi), cell_shape)
            pair_edge.append(local_edge[valid])
            pair_cell.append(cells[valid])
        edge_offset += n_edges_ax

    a_nodes = np.concatenate(a_nodes)
    b_nodes = np.concatenate(b_nodes)
    pair_edge = np.concatenate(pair_edge)
    pair_cell = np.concatenate(pair_cell)
    n_edges = a_nodes.size
    n_adjacent = np.bincount(pair_edge, minlength=n_edges)

    rows = np.concatenate([np.arange(n_edges), np.arange(n_edges)])
    cols = np.concatenate([a_nodes, b_nodes])
    vals = np.concatenate([np.ones(n_edges), -np.ones(n_edges)])
    incidence = sp.csr_matrix((vals, (rows, cols)), shape=(n_edges, grid.n_nodes))

    structure = {
        "pair_edge": pair_edge,
        "pair_cell": pair_cell,
        "n_adjacent": n_adjacent,
        "incidence": incidence,
        "incidence_t": incidence.T.tocsr(),
    }
    _EDGE_CACHE[key] = structure
    return structure


@dataclass
class DiscreteOperator:
    """Assembled operator A(sigma) plus the pieces its sensitivities need."""

    grid: Grid
    sigma: np.ndarray  # per-cell conductivity at assembly
    matrix: sp.csr_matrix
    incidence: sp.csr_matrix  # edges x nodes
    incidence_t: sp.csr_matrix
    conductance: np.ndarray  # per-edge g
    dsigma: sp.csr_matrix  # cells x edges, d g_e / d sigma_c at assembly
    diag: np.ndarray
    _amg: object = field(default=None, repr=False)
    _chol: object = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.grid.n_nodes

    def amg(self):
        """Lazily built multigrid hierarchy (symmetric preconditioner for CG)."""
        if self._amg is None:
            import pyamg

            self._amg = pyamg.smoothed_aggregation_solver(
                self.matrix.tocsr(), max_coarse=32
            )
        return self._amg

    def cholesky(self):
        """Dense Cholesky of a lightly shifted copy (preconditioner only).

        Only sensible at desk scales; refuses grids beyond 8192 nodes.
        """
        if self._chol is None:
            import scipy.linalg

            if self.n_nodes > 8192:
                raise ValueError(
                    f"cholesky preconditioner is for small grids "
                    f"(<= 8192 nodes, operator has {self.n_nodes})"
                )
            shift = 1e-8 * float(self.diag.mean())
            dense = self.matrix.toarray()
            dense[np.diag_indices_from(dense)] += shift
            self._chol = scipy.linalg.cho_factor(dense, lower=True)
        return self._chol


def assemble(grid: Grid, sigma_cells: np.ndarray) -> DiscreteOperator:
    """Assemble the finite-volume operator for per-cell conductivities.

    Edge conductance: h^(d-2) * (n_adj / 2^(d-1)) * harmmean(adjacent sigma),
    where n_adj/2^(d-1) is the fraction of the dual face lying inside the
    domain (boundary edges get reduced weight; homogeneous Neumann is built
    in, no boundary rows are removed).
    """
    sigma_cells = np.asarray(sigma_cells, dtype=float).ravel()
    if sigma_cells.size != grid.n_cells:
        raise ValueError(
            f"sigma has {sigma_cells.size} entries, grid has {grid.n_cells} cells"
        )
    if not np.all(sigma_cells > 0.0):
        raise ValueError("conductivity must be positive in every cell")

    st = _edge_structure(grid)
    pair_edge, pair_cell = st["pair_edge"], st["pair_cell"]
    n_adj = st["n_adjacent"]
    n_edges = n_adj.size
    d = grid.dim
    scale = grid.h[0] ** (d - 2)

    inv_sum = np.bincount(pair_edge, weights=1.0 / sigma_cells[pair_cell], minlength=n_edges)
    # g = scale * (n_adj / 2^(d-1)) * n_adj / inv_sum
    g = scale * n_adj.astype(float) ** 2 / (2 ** (d - 1) * inv_sum)

    inc = st["incidence"]
    matrix = (st["incidence_t"] @ sp.diags(g) @ inc).tocsr()

    # d g_e / d sigma_c = scale * n_adj^2 / (2^(d-1) inv_sum^2 sigma_c^2)
    dvals = scale * n_adj[pair_edge].astype(float) ** 2 / (
        2 ** (d - 1) * inv_sum[pair_edge] ** 2 * sigma_cells[pair_cell] ** 2
    )
    dsigma = sp.csr_matrix(
        (dvals, (pair_cell, pair_edge)), shape=(grid.n_cells, n_edges)
    )

    return DiscreteOperator(
        grid=grid,
        sigma=sigma_cells,
        matrix=matrix,
        incidence=inc,
        incidence_t=st["incidence_t"],
        conductance=g,
        dsigma=dsigma,
        diag=matrix.diagonal(),
    )


def _demean_columns(x: np.ndarray) -> np.ndarray:
    return x - x.mean(axis=0, keepdims=True)


def solve_many(
    op: DiscreteOperator,
    rhs: np.ndarray,
    *,
    tol: float = 1e-10,
    counter: SolveCounter | None = None,
    preconditioner: str = "jacobi",
    maxiter: int | None = None,
) -> np.ndarray:
    """Solve A u = b for every column of ``rhs`` in the mean-zero subspace.

    Preconditioned CG with per-column convergence at relative residual
    ``tol``; columns that converge drop out of the iteration. Exactly one
    counter tick per nonzero column; all-zero columns short-circuit to zero.
    Raises :class:`SolverError` if any column fails to converge.
    """
    rhs = np.asarray(rhs, dtype=float)
    squeeze = rhs.ndim == 1
    B = rhs.reshape(-1, 1) if squeeze else rhs.copy()
    n, k = B.shape
    if n != op.n_nodes:
        raise ValueError(f"rhs has {n} rows, operator has {op.n_nodes} nodes")

    bnorm = np.linalg.norm(B, axis=0)
    colsum = np.abs(B.sum(axis=0))
    bad = colsum > 1e-12 * np.maximum(bnorm, 1e-300)
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"rhs column {j} is incompatible with the pure-Neumann operator "
            f"(sum {B[:, j].sum():.3e} vs norm {bnorm[j]:.3e})"
        )

    active = np.flatnonzero(bnorm > 0.0)
    X = np.zeros_like(B)
    if active.size == 0:
        return X[:, 0] if squeeze else X
    if counter is not None:
        counter.add(int(active.size))

    if preconditioner == "jacobi":
        dinv = 1.0 / op.diag

        def prec(R):
            return _demean_columns(R * dinv[:, None])

    elif preconditioner == "amg":
        ml = op.amg()

        def prec(R):
            Z = np.empty_like(R)
            for j in range(R.shape[1]):
                Z[:, j] = ml.solve(R[:, j], maxiter=1, tol=1e-300, accel=None, cycle="V")
            return _demean_columns(Z)

    elif preconditioner == "cholesky":
        import scipy.linalg

        cho = op.cholesky()

        def prec(R):
            return _demean_columns(scipy.linalg.cho_solve(cho, R))

    elif preconditioner == "none":
        prec = _demean_columns
    else:
        raise ValueError(f"unknown preconditioner {preconditioner!r}")

    if maxiter is None:
        maxiter = 2 * n + 200

    A = op.matrix
    cols = active.copy()
    R = _demean_columns(B[:, cols])
    target = tol * bnorm[cols]
    Xa = np.zeros((n, cols.size))
    Z = prec(R)
    P = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)

    worst = np.inf
    # the head check consumes one trip, so allow maxiter true updates
    for _ in range(maxiter + 1):
        res = np.linalg.norm(R, axis=0)
        done = res <= target
        if np.any(done):
            keep = ~done
            X[:, cols[done]] = Xa[:, done]
            cols, Xa, R, Z, P = cols[keep], Xa[:, keep], R[:, keep], Z[:, keep], P[:, keep]
            target, rz = target[keep], rz[keep]
            if cols.size == 0:
                break
        Q = A @ P
        pq = np.einsum("ij,ij->j", P, Q)
        if np.any(pq <= 0.0):
            worst = float(np.max(np.linalg.norm(R, axis=0) / np.maximum(target / tol, 1e-300)))
            raise SolverError(
                f"CG breakdown (nonpositive curvature); relative residual {worst:.3e}",
                worst,
            )
        alpha = rz / pq
        Xa += alpha * P
        R -= alpha * Q
        Z = prec(R)
        rz_new = np.einsum("ij,ij->j", R, Z)
        beta = rz_new / rz
        P = Z + beta * P
        rz = rz_new
    else:
        worst = float(np.max(np.linalg.norm(R, axis=0) * tol / target))
        raise SolverError(
            f"CG did not converge in {maxiter} iterations; "
            f"worst relative residual {worst:.3e}",
            worst,
        )

    X = _demean_columns(X)
    return X[:, 0] if squeeze else X


def solve(
    op: DiscreteOperator,
    rhs: np.ndarray,
    *,
    tol: float = 1e-10,
    counter: SolveCounter | None = None,
    preconditioner: str = "jacobi",
    maxiter: int | None = None,
) -> np.ndarray:
    """Single-rhs convenience wrapper around :func:`solve_many`."""
    return solve_many(
        op, rhs, tol=tol, counter=counter, preconditioner=preconditioner, maxiter=maxiter
    )


def make_dipole_source(grid: Grid, x_src, x_sink, forbidden=()) -> np.ndarray:
    """Unit dipole load: +1 at the boundary node nearest x_src, -1 near x_sink.

    Rejects placement at domain corners and collisions with ``forbidden``
    nodes (receiver locations), which keeps sources separated from both the
    corners and the measurement patch.
    """
    a = grid.nearest_boundary_node(x_src)
    b = grid.nearest_boundary_node(x_sink)
    if a == b:
        raise ValueError(f"degenerate dipole: source and sink map to node {a}")
    corners = set(grid.corner_node_ids().tolist())
    forbidden = set(np.asarray(forbidden, dtype=int).ravel().tolist()) if len(forbidden) else set()
    for name, node in (("source", a), ("sink", b)):
        if node in corners:
            raise ValueError(f"{name} falls on a domain corner (node {node})")
        if node in forbidden:
            raise ValueError(f"{name} collides with a receiver (node {node})")
    q = np.zeros(grid.n_nodes)
    q[a] = 1.0
    q[b] = -1.0
    return q


@dataclass
class ExperimentSet:
    """Sources, per-experiment receivers and data for one acquisition.

    ``receivers[i]`` lists the global node ids where experiment i measured;
    ``data[i]`` holds the (mean-subtracted, noisy) values there. After data
    completion all receiver lists equal ``lam_union`` and
    ``completed_fraction`` records the fraction of entries that were filled
    in.
    """

    grid: Grid
    src_nodes: np.ndarray
    snk_nodes: np.ndarray
    receivers: list[np.ndarray]
    data: list[np.ndarray]
    lam_union: np.ndarray
    eta: np.ndarray
    sd: float | None = None
    completed_fraction: float | None = None
    access_count: int = 0

    @property
    def n_experiments(self) -> int:
        return int(self.src_nodes.size)

    @property
    def shared_receivers(self) -> bool:
        lam = self.lam_union
        return all(r.size == lam.size and np.array_equal(r, lam) for r in self.receivers)

    def note_access(self) -> None:
        self.access_count += 1

    def data_matrix(self) -> np.ndarray:
        """Data as an (l, s) matrix; requires shared receivers."""
        if not self.shared_receivers:
            raise ValueError("data_matrix requires shared receiver sets")
        return np.stack(self.data, axis=1)

    def source_matrix(self, indices=None) -> np.ndarray:
        """Dense dipole right-hand sides for the selected experiments."""
        idx = np.arange(self.n_experiments) if indices is None else np.asarray(indices)
        B = np.zeros((self.grid.n_nodes, idx.size))
        B[self.src_nodes[idx], np.arange(idx.size)] = 1.0
        B[self.snk_nodes[idx], np.arange(idx.size)] -= 1.0
        return B

    def combination_rhs(self, w: np.ndarray) -> np.ndarray:
        """sum_i w_i q_i for one weight vector or a (s, k) block of them."""
        w = np.asarray(w, dtype=float)
        squeeze = w.ndim == 1
        W = w.reshape(-1, 1) if squeeze else w
        if W.shape[0] != self.n_experiments:
            raise ValueError(f"weights have {W.shape[0]} rows, expected {self.n_experiments}")
        rhs = np.zeros((self.grid.n_nodes, W.shape[1]))
        np.add.at(rhs, self.src_nodes, W)
        np.subtract.at(rhs, self.snk_nodes, W)
        return rhs[:, 0] if squeeze else rhs

    def validate(self) -> None:
        s = self.n_experiments
        if not (len(self.receivers) == len(self.data) == s == self.snk_nodes.size):
            raise ValueError("inconsistent experiment counts")
        interior = np.concatenate(
            [segment_interior_nodes(self.grid, seg) for seg in self.grid.segments.values()]
        )
        interior = set(interior.tolist())
        lam = set(self.lam_union.tolist())
        if not lam <= interior:
            raise ValueError("union receiver set contains non-interior boundary nodes")
        for i in range(s):
            ri = self.receivers[i]
            if self.data[i].size != ri.size:
                raise ValueError(f"experiment {i}: data length {self.data[i].size} != |receivers| {ri.size}")
            if not set(ri.tolist()) <= lam:
                raise ValueError(f"experiment {i}: receivers not contained in the union set")
            if self.src_nodes[i] in lam or self.snk_nodes[i] in lam:
                raise ValueError(f"experiment {i}: source node coincides with a receiver")


def project_receivers(u: np.ndarray, receivers: np.ndarray) -> np.ndarray:
    """Sample a field at receiver nodes and subtract the sample mean.

    This is the zero-row-sum projection: constant fields map to zero, so
    only potential differences matter.
    """
    vals = u[receivers]
    return vals - vals.mean(axis=0, keepdims=True) if vals.ndim > 1 else vals - vals.mean()


def predict(
    op: DiscreteOperator,
    experiments: ExperimentSet,
    i: int,
    counter: SolveCounter | None = None,
    **solver,
) -> np.ndarray:
    """Predicted data of experiment i: mean-subtracted field at its receivers."""
    u = solve(op, experiments.source_matrix([i])[:, 0], counter=counter, **solver)
    return project_receivers(u, experiments.receivers[i])


def ss_aggregate(
    op: DiscreteOperator,
    experiments: ExperimentSet,
    w: np.ndarray,
    counter: SolveCounter | None = None,
    **solver,
) -> np.ndarray:
    """Simultaneous-sources prediction P A^-1 (sum_i w_i q_i): one solve.

    Valid only when all experiments share one receiver set; per-experiment
    predictions combine linearly through the single aggregated source.
    """
    if not experiments.shared_receivers:
        raise ValueError(
            "simultaneous sources requires shared receiver sets; "
            "complete the data to the union receiver set first"
        )
    u = solve(op, experiments.combination_rhs(w), counter=counter, **solver)
    return project_receivers(u, experiments.lam_union)


class ModelSensitivity:
    """Products with G(m, u) = d(A(psi(m)) u)/dm and its transpose.

    Bound to one assembled operator and the transfer-function derivative at
    the same model; fields u enter per column, so blocks of experiments are
    handled at once.
    """

    def __init__(self, op: DiscreteOperator, dpsi_cells: np.ndarray):
        self.op = op
        self.weighted = op.dsigma.multiply(dpsi_cells.reshape(-1, 1)).tocsr()
        self.weighted_t = self.weighted.T.tocsr()

    def apply(self, z: np.ndarray, U: np.ndarray) -> np.ndarray:
        """G(m, u_j) z for every field column u_j; returns node-space block."""
        dg = self.weighted_t @ z  # per-edge conductance perturbation
        dU = self.op.incidence @ (U if U.ndim > 1 else U.reshape(-1, 1))
        out = self.op.incidence_t @ (dg[:, None] * dU)
        return out if U.ndim > 1 else out[:, 0]

    def apply_t(self, U: np.ndarray, V: np.ndarray) -> np.ndarray:
        """G(m, u_j)^T v_j per column; returns cell-space block."""
        U2 = U if U.ndim > 1 else U.reshape(-1, 1)
        V2 = V if V.ndim > 1 else V.reshape(-1, 1)
        out = self.weighted @ ((self.op.incidence @ U2) * (self.op.incidence @ V2))
        return out if U.ndim > 1 else out[:, 0]


def scatter_centered(
    grid: Grid, receivers: np.ndarray, y: np.ndarray
) -> np.ndarray:
    """Adjoint of :func:`project_receivers`: center y, scatter to nodes."""
    out = np.zeros(grid.n_nodes)
    out[receivers] = y - y.mean()
    return out


def gn_matvec(
    op: DiscreteOperator,
    sens: ModelSensitivity,
    u_field: np.ndarray,
    receivers: np.ndarray,
    z: np.ndarray,
    counter: SolveCounter | None = None,
    **solver,
) -> np.ndarray:
    """Jacobian-vector product J z = -P A^-1 G(m, u) z; one counted solve."""
    w = solve(op, sens.apply(z, u_field), counter=counter, **solver)
    return -project_receivers(w, receivers)


def gn_rmatvec(
    op: DiscreteOperator,
    sens: ModelSensitivity,
    u_field: np.ndarray,
    receivers: np.ndarray,
    y: np.ndarray,
    counter: SolveCounter | None = None,
    **solver,
) -> np.ndarray:
    """Adjoint product J^T y = -G(m, u)^T A^-1 P^T y; one counted solve."""
    w = solve(op, scatter_centered(op.grid, receivers, y), counter=counter, **solver)
    return -sens.apply_t(u_field, w)


class ForwardResiduals:
    """Residual provider backed by PDE solves, for the misfit estimators.

    ``residual(i)`` serves the random-subset path (one solve per selected
    experiment, works for heterogeneous receivers); ``combo_residual(w)``
    serves simultaneous sources (one solve per weight column, shared
    receivers only).
    """

    def __init__(
        self,
        op: DiscreteOperator,
        experiments: ExperimentSet,
        counter: SolveCounter | None = None,
        **solver,
    ):
        self.op = op
        self.experiments = experiments
        self.counter = counter
        self.solver = solver

    @property
    def n_experiments(self) -> int:
        return self.experiments.n_experiments

    def residual(self, i: int) -> np.ndarray:
        self.experiments.note_access()
        return predict(self.op, self.experiments, i, self.counter, **self.solver) - self.experiments.data[i]

    def residual_block(self, indices) -> list[np.ndarray]:
        idx = np.asarray(indices, dtype=int)
        self.experiments.note_access()
        U = solve_many(
            self.op, self.experiments.source_matrix(idx), counter=self.counter, **self.solver
        )
        out = []
        for j, i in enumerate(idx):
            ri = self.experiments.receivers[i]
            out.append(project_receivers(U[:, j], ri) - self.experiments.data[i])
        return out

    def combo_residual(self, w: np.ndarray) -> np.ndarray:
        self.experiments.note_access()
        pred = ss_aggregate(self.op, self.experiments, w, self.counter, **self.solver)
        return pred - self.experiments.data_matrix() @ w

    def combo_block(self, W: np.ndarray) -> np.ndarray:
        if not self.experiments.shared_receivers:
            raise ValueError(
                "simultaneous sources requires shared receiver sets; "
                "complete the data to the union receiver set first"
            )
        self.experiments.note_access()
        U = solve_many(
            self.op, self.experiments.combination_rhs(W), counter=self.counter, **self.solver
        )
        return project_receivers(U, self.experiments.lam_union) - self.experiments.data_matrix() @ W

    def full_misfit(self) -> float:
        """Sum of squared residual norms over all experiments (s solves)."""
        res = self.residual_block(np.arange(self.n_experiments))
        return float(sum(np.dot(r, r) for r in res))
