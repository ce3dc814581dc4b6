"""Two-stage stabilized Gauss-Newton inversion with adaptive sample size.

Each outer iteration fits the model against a sampled reduction of the fit
data (one stabilized GN step: truncated CG on the GN normal equations plus
Armijo backtracking), then assesses the iterate on independently sampled
reductions of the control data. Cross validation demands a kappa-fold
decrease of the sampled misfit; failure doubles the sample size. When the
cheap uncertainty check passes, the hard stopping rule evaluates the full
control misfit, while the relaxed rule repeats the uncertainty check with
a fresh draw of at least t0 columns and stops when it holds again.

Fit and control data may independently be the original (heterogeneous
receivers, random-subset sampling only) or the completed data (shared
receivers, any sampling). With completed control data the stopping
tolerance is inflated by 1 + c, c the completed fraction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields

import numpy as np

from .estimators import DISTRIBUTIONS, WeightMatrix, draw_weights, misfit_estimate
from .forward import (
    ExperimentSet,
    ForwardResiduals,
    ModelSensitivity,
    SolveCounter,
    assemble,
    project_receivers,
    solve_many,
)
from .grid import Grid
from .transfer import TransferFunction

DATA_ROLES = ("original", "completed")
STOP_RULES = ("hard", "relaxed")

VARIANTS = {
    # fit data, control data, forced fit/control distributions (None = free)
    "i": ("original", "original"),
    "ii": ("completed", "completed"),
    "iii": ("completed", "original"),
}


class StagnationError(RuntimeError):
    """The line search could not produce a decrease."""


@dataclass
class VariantConfig:
    """Choices and tolerances for one inversion run."""

    fit_data: str
    control_data: str
    stop_rule: str
    fit_distribution: str
    control_distribution: str
    rho: float
    kappa: float = 0.9
    t0: int = 100
    r: int = 20
    pcg_tol: float = 1e-3
    max_iter: int = 50
    armijo_c1: float = 1e-4
    max_backtracks: int = 20

    def __post_init__(self):
        self.validate()

    @classmethod
    def for_variant(cls, variant: str, stop_rule: str, rho: float, **overrides) -> VariantConfig:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
        fit_data, control_data = VARIANTS[variant]
        kwargs = dict(
            fit_data=fit_data,
            control_data=control_data,
            stop_rule=stop_rule,
            fit_distribution="random_subset" if fit_data == "original" else "gaussian",
            control_distribution="random_subset" if control_data == "original" else "hutchinson",
            rho=rho,
        )
        kwargs.update(overrides)
        return cls(**kwargs)

    @property
    def variant(self) -> str:
        for name, (fit, control) in VARIANTS.items():
            if (fit, control) == (self.fit_data, self.control_data):
                return name
        return f"({self.fit_data},{self.control_data})"

    def validate(self) -> None:
        if self.fit_data not in DATA_ROLES or self.control_data not in DATA_ROLES:
            raise ValueError("fit_data and control_data must be 'original' or 'completed'")
        if (self.fit_data, self.control_data) == ("original", "completed"):
            raise ValueError("fitting on original data with completed control is not a variant")
        if self.stop_rule not in STOP_RULES:
            raise ValueError(f"stop_rule must be one of {STOP_RULES}")
        for name, dist, data in (
            ("fit", self.fit_distribution, self.fit_data),
            ("control", self.control_distribution, self.control_data),
        ):
            if dist not in DISTRIBUTIONS:
                raise ValueError(f"unknown {name} distribution {dist!r}")
            if data == "original" and dist != "random_subset":
                raise ValueError(
                    f"{name} data is original (unequal receivers): only random_subset applies"
                )
        if not 0.0 < self.kappa < 1.0:
            raise ValueError(f"kappa must be in (0, 1), got {self.kappa}")
        if self.t0 < 2:
            raise ValueError(f"t0 must be at least 2, got {self.t0}")
        if self.r < 1:
            raise ValueError(f"PCG iteration limit must be >= 1, got {self.r}")
        if self.rho < 0.0:
            raise ValueError(f"stopping tolerance must be nonnegative, got {self.rho}")

    def echo(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class OperatorCache:
    """Keeps the last few assembled operators keyed by the exact model bytes.

    Within one iteration the same model is assembled for fitting, cross
    validation and the uncertainty check; reusing the operator also reuses
    its lazily factored preconditioner.
    """

    def __init__(self, grid: Grid, tf: TransferFunction, maxsize: int = 4):
        self.grid = grid
        self.tf = tf
        self.maxsize = maxsize
        self._cache: dict[bytes, tuple] = {}

    def at(self, m: np.ndarray):
        key = m.tobytes()
        if key not in self._cache:
            op = assemble(self.grid, self.tf.sigma(m))
            sens = ModelSensitivity(op, self.tf.sigma_prime(m))
            if len(self._cache) >= self.maxsize:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = (op, sens)
        return self._cache[key]


@dataclass
class ReducedState:
    """Forward state of a reduced objective at one model."""

    op: object
    sens: ModelSensitivity
    fields: np.ndarray  # solved fields, one column per reduced experiment
    residuals: list[np.ndarray]
    receivers: list[np.ndarray]
    phi: float


class ReducedObjective:
    """phi_hat(., W) for a fixed weight draw, with GN products.

    Dense weight columns become synthetic simultaneous-source experiments
    (aggregated source, combined data, weight 1/k); subset columns select
    original experiments with weight s/k. Either way the objective is
    sum_j c_j ||P_j A(m)^-1 q_j - d_j||^2 and GN products follow the same
    batched path.
    """

    def __init__(
        self,
        cache: OperatorCache,
        experiments: ExperimentSet,
        weights: WeightMatrix,
        counter: SolveCounter | None,
        solver: dict,
    ):
        self.cache = cache
        self.experiments = experiments
        self.counter = counter
        self.solver = solver
        experiments.note_access()
        if weights.distribution == "random_subset":
            idx, scale = weights.subset()
            self.rhs = experiments.source_matrix(idx)
            self.data = [experiments.data[i] for i in idx]
            self.receivers = [experiments.receivers[i] for i in idx]
            self.weights = scale**2
        else:
            if not experiments.shared_receivers:
                raise ValueError(
                    "simultaneous sources requires shared receiver sets; "
                    "complete the data to the union receiver set first"
                )
            W = weights.entries
            self.rhs = experiments.combination_rhs(W)
            D = experiments.data_matrix() @ W
            self.data = [D[:, j] for j in range(W.shape[1])]
            self.receivers = [experiments.lam_union] * W.shape[1]
            self.weights = np.full(W.shape[1], 1.0 / W.shape[1])
        self.k = self.rhs.shape[1]

    def evaluate(self, m: np.ndarray) -> tuple[float, ReducedState]:
        """Reduced misfit at m; costs k solves."""
        op, sens = self.cache.at(m)
        U = solve_many(op, self.rhs, counter=self.counter, **self.solver)
        residuals = [
            project_receivers(U[:, j], self.receivers[j]) - self.data[j]
            for j in range(self.k)
        ]
        phi = float(sum(c * np.dot(r, r) for c, r in zip(self.weights, residuals)))
        return phi, ReducedState(op, sens, U, residuals, self.receivers, phi)

    def _scatter_block(self, state: ReducedState, vecs: list[np.ndarray]) -> np.ndarray:
        out = np.zeros((state.op.n_nodes, self.k))
        for j, (recv, y) in enumerate(zip(state.receivers, vecs)):
            out[recv, j] = y - y.mean()
        return out

    def gradient_rhs(self, state: ReducedState) -> np.ndarray:
        """b = -(1/2) grad phi_hat = sum_j c_j G(u_j)^T A^-1 P_j^T r_j; k solves."""
        V = solve_many(
            state.op, self._scatter_block(state, state.residuals),
            counter=self.counter, **self.solver,
        )
        return (state.sens.apply_t(state.fields, V) * self.weights).sum(axis=1)

    def hess_vec(self, state: ReducedState, z: np.ndarray) -> np.ndarray:
        """Gauss-Newton Hessian product sum_j c_j J_j^T J_j z; 2k solves."""
        T = state.sens.apply(z, state.fields)
        W = solve_many(state.op, T, counter=self.counter, **self.solver)
        projected = [project_receivers(W[:, j], state.receivers[j]) for j in range(self.k)]
        V = solve_many(
            state.op, self._scatter_block(state, projected),
            counter=self.counter, **self.solver,
        )
        return (state.sens.apply_t(state.fields, V) * self.weights).sum(axis=1)


@dataclass
class StepInfo:
    phi_before: float
    phi_after: float
    alpha: float
    backtracks: int
    cg_iters: int
    step_norm: float


def gn_step(
    objective,
    m: np.ndarray,
    r: int,
    pcg_tol: float,
    armijo_c1: float = 1e-4,
    max_backtracks: int = 20,
) -> tuple[np.ndarray, StepInfo]:
    """One stabilized GN iteration on the reduced objective.

    The normal equations are solved by at most r CG iterations at relative
    tolerance pcg_tol (the truncation is the stabilization), followed by
    Armijo backtracking from alpha = 1. Raises :class:`StagnationError`
    when no step achieves sufficient decrease.
    """
    phi0, state = objective.evaluate(m)
    b = objective.gradient_rhs(state)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return m.copy(), StepInfo(phi0, phi0, 1.0, 0, 0, 0.0)

    # truncated CG on H delta = b, starting from zero
    delta = np.zeros_like(b)
    resid = b.copy()
    p = resid.copy()
    rz = float(np.dot(resid, resid))
    cg_iters = 0
    for _ in range(r):
        if np.sqrt(rz) <= pcg_tol * bnorm:
            break
        Hp = objective.hess_vec(state, p)
        pq = float(np.dot(p, Hp))
        if pq <= 0.0:
            break  # flat/indefinite direction; keep the current iterate
        alpha_cg = rz / pq
        delta += alpha_cg * p
        resid -= alpha_cg * Hp
        rz_new = float(np.dot(resid, resid))
        p = resid + (rz_new / rz) * p
        rz = rz_new
        cg_iters += 1

    slope = float(np.dot(b, delta))  # = -(1/2) directional derivative
    if slope <= 0.0 or not np.all(np.isfinite(delta)):
        if float(np.linalg.norm(delta)) == 0.0:
            return m.copy(), StepInfo(phi0, phi0, 1.0, 0, cg_iters, 0.0)
        raise StagnationError("GN produced a non-descent search direction")

    alpha = 1.0
    for bt in range(max_backtracks + 1):
        m_trial = m + alpha * delta
        phi_t, _ = objective.evaluate(m_trial)
        if phi_t <= phi0 - 2.0 * armijo_c1 * alpha * slope:
            return m_trial, StepInfo(
                phi0, phi_t, alpha, bt, cg_iters, float(np.linalg.norm(alpha * delta))
            )
        alpha *= 0.5
    raise StagnationError(
        f"line search failed after {max_backtracks} halvings "
        f"(phi {phi0:.6e}, best trial {phi_t:.6e})"
    )


class ControlEvaluator:
    """Sampled and full misfits of the control data at arbitrary models."""

    def __init__(
        self,
        cache: OperatorCache,
        experiments: ExperimentSet,
        counter: SolveCounter | None,
        solver: dict,
    ):
        self.cache = cache
        self.experiments = experiments
        self.counter = counter
        self.solver = solver

    def provider(self, m: np.ndarray) -> ForwardResiduals:
        op, _ = self.cache.at(m)
        return ForwardResiduals(op, self.experiments, self.counter, **self.solver)

    def phi_hat(self, m: np.ndarray, weights: WeightMatrix) -> float:
        return misfit_estimate(self.provider(m), weights)

    def phi_full(self, m: np.ndarray) -> float:
        return self.provider(m).full_misfit()


def cross_validation(
    control: ControlEvaluator,
    m_old: np.ndarray,
    m_new: np.ndarray,
    weights: WeightMatrix,
    kappa: float,
) -> tuple[bool, float, float]:
    """Does the sampled control misfit decrease by the factor kappa?"""
    phi_new = control.phi_hat(m_new, weights)
    phi_old = control.phi_hat(m_old, weights)
    return phi_new <= kappa * phi_old, phi_new, phi_old


def uncertainty_check(
    control: ControlEvaluator,
    m_new: np.ndarray,
    weights: WeightMatrix,
    rho: float,
) -> tuple[bool, float]:
    """Sampled stand-in for the stopping test: phi_hat <= rho."""
    phi = control.phi_hat(m_new, weights)
    return phi <= rho, phi


@dataclass
class IterationRecord:
    iter: int
    s_n: int
    t_n: int | None
    phi_hat_fit: float | None
    phi_hat_cv: float | None
    phi_hat_unc: float | None
    phi_full: float | None
    cum_solves: int
    event: str
    # not part of the CSV contract, kept for audits
    phi_hat_cv_prev: float | None = None
    phi_hat_unc_final: float | None = None
    alpha: float | None = None
    cg_iters: int | None = None

    CSV_FIELDS = (
        "iter", "s_n", "t_n", "phi_hat_fit", "phi_hat_cv",
        "phi_hat_unc", "phi_full", "cum_solves", "event",
    )


@dataclass
class RunLog:
    config_echo: dict
    rows: list[IterationRecord] = field(default_factory=list)
    termination_reason: str = ""

    @property
    def total_solves(self) -> int:
        return self.rows[-1].cum_solves if self.rows else 0

    def sample_sizes(self) -> list[int]:
        return [row.s_n for row in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(IterationRecord.CSV_FIELDS)
            for row in self.rows:
                writer.writerow(
                    ["" if getattr(row, name) is None else getattr(row, name)
                     for name in IterationRecord.CSV_FIELDS]
                )


def read_runlog_csv(path) -> list[dict]:
    """Parse a run-log CSV back into typed per-iteration dicts."""
    out = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row: dict = {}
            for key, val in raw.items():
                if val == "":
                    row[key] = None
                elif key in ("iter", "s_n", "t_n", "cum_solves"):
                    row[key] = int(val)
                elif key == "event":
                    row[key] = val
                else:
                    row[key] = float(val)
            out.append(row)
    return out


def run(
    cfg: VariantConfig,
    grid: Grid,
    tf: TransferFunction,
    fit_set: ExperimentSet,
    control_set: ExperimentSet,
    m0: np.ndarray,
    rng_hub,
    counter: SolveCounter | None = None,
    solver: dict | None = None,
    trace_hook=None,
    cache: OperatorCache | None = None,
) -> tuple[np.ndarray, RunLog]:
    """Run the full two-stage iteration until a stopping event.

    Returns the final model and the run log; every termination reason is
    recorded, never silent. ``trace_hook(n, m)`` is invoked with each
    accepted iterate (and once with the initial model at n = -1) for
    plotting-only diagnostics that must not touch the solve counter.
    """
    for name, dataset in (("fit", fit_set), ("control", control_set)):
        role = getattr(cfg, f"{name}_data")
        is_completed = dataset.completed_fraction is not None
        if (role == "completed") != is_completed:
            raise ValueError(
                f"{name} data mismatch: config says {role!r} but the dataset is "
                f"{'completed' if is_completed else 'original'}"
            )
    solver = dict(solver or {})
    counter = counter if counter is not None else SolveCounter()
    s = fit_set.n_experiments
    if control_set.n_experiments != s:
        raise ValueError("fit and control data must cover the same experiments")

    rho_eff = cfg.rho
    inflation = 1.0
    if cfg.control_data == "completed":
        inflation = 1.0 + control_set.completed_fraction
        rho_eff = inflation * cfg.rho

    cache = cache if cache is not None else OperatorCache(grid, tf)
    control = ControlEvaluator(cache, control_set, counter, solver)
    log = RunLog(
        config_echo={
            **cfg.echo(),
            "variant": cfg.variant,
            "rho_effective": rho_eff,
            "rho_inflation_factor": inflation,
            "s": s,
            "solver": dict(solver),
            "grid_dim": grid.dim,
            "grid_n": grid.n_cells_per_axis[0],
            "grid_h": grid.h[0],
        }
    )

    m = np.asarray(m0, dtype=float).copy()
    if trace_hook is not None:
        trace_hook(-1, m)
    s_n = 1
    terminated = False
    for n in range(cfg.max_iter):
        w_fit = draw_weights(s, s_n, cfg.fit_distribution, rng_hub.stream("fit"))
        objective = ReducedObjective(cache, fit_set, w_fit, counter, solver)
        try:
            m_new, info = gn_step(
                objective, m, cfg.r, cfg.pcg_tol, cfg.armijo_c1, cfg.max_backtracks
            )
        except StagnationError as exc:
            log.rows.append(IterationRecord(
                iter=n, s_n=s_n, t_n=None, phi_hat_fit=None, phi_hat_cv=None,
                phi_hat_unc=None, phi_full=None, cum_solves=counter.count,
                event="terminated",
            ))
            log.termination_reason = f"stagnation: {exc}"
            return m, log

        w_cv = draw_weights(s, s_n, cfg.control_distribution, rng_hub.stream("cv"))
        w_unc = draw_weights(s, s_n, cfg.control_distribution, rng_hub.stream("uncertainty"))

        t_n = None
        phi_unc = None
        phi_full = None
        phi_unc_final = None
        cv_ok, phi_cv_new, phi_cv_old = cross_validation(control, m, m_new, w_cv, cfg.kappa)
        if cv_ok:
            unc_ok, phi_unc = uncertainty_check(control, m_new, w_unc, rho_eff)
            if unc_ok:
                if cfg.stop_rule == "hard":
                    phi_full = control.phi_full(m_new)
                    if phi_full <= rho_eff:
                        event = "terminated"
                        log.termination_reason = "stop_criterion"
                        terminated = True
                    else:
                        event = "stop_check_fail"
                else:
                    t_n = min(s, max(cfg.t0, s_n))
                    w_final = draw_weights(
                        s, t_n, cfg.control_distribution, rng_hub.stream("uncertainty")
                    )
                    final_ok, phi_unc_final = uncertainty_check(control, m_new, w_final, rho_eff)
                    if final_ok:
                        event = "terminated"
                        log.termination_reason = "relaxed_stop"
                        terminated = True
                    else:
                        event = "stop_check_fail"
                s_next = s_n
            else:
                event = "unc_fail"
                s_next = s_n
        else:
            event = "cv_fail"
            s_next = min(2 * s_n, s)

        log.rows.append(IterationRecord(
            iter=n, s_n=s_n, t_n=t_n, phi_hat_fit=info.phi_after,
            phi_hat_cv=phi_cv_new, phi_hat_unc=phi_unc, phi_full=phi_full,
            cum_solves=counter.count, event=event,
            phi_hat_cv_prev=phi_cv_old, phi_hat_unc_final=phi_unc_final,
            alpha=info.alpha, cg_iters=info.cg_iters,
        ))
        m = m_new
        if trace_hook is not None:
            trace_hook(n, m)
        if terminated:
            return m, log
        s_n = s_next

    log.termination_reason = "max_iter"
    return m, log
