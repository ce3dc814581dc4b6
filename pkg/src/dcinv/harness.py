"""Synthetic experiment definition, data generation, and end-to-end runs.

Data is always generated on a grid twice as fine as the reconstruction
grid (coincident nodes carry the receivers), mean-subtracted per
experiment, peppered with Gaussian noise scaled to a percentage of the
clean-data norm, and then knocked out: a fixed count of entries per
experiment (the requested percentage of the union receiver set) is removed
uniformly at random, which is what breaks receiver sharing.

``run_example`` runs the central comparison at configurable scale: a random-subset arm on the original data against a
simultaneous-sources arm on completed data, both consuming the identical
noisy, knocked-out realization.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .completion import COMPLETION_KINDS, CompletionResult, complete_all
from .forward import ExperimentSet, ForwardResiduals, SolveCounter, assemble, solve_many
from .grid import Grid, build_grid, segment_interior_nodes
from .inversion import OperatorCache, RunLog, VariantConfig, run
from .models import MODEL_IDS, make_true_model
from .rng import RngHub
from .transfer import TransferFunction, bounds_transfer, initial_guess, level_set_transfer

STOP_RULES = {"a": "hard", "b": "relaxed"}


@dataclass
class ExperimentSpec:
    """Complete description of one synthetic inversion experiment."""

    dim: int = 2
    n: int = 33
    p: int = 8
    borehole_directed: bool = True  # 3D: s = 4p^2; undirected pairs give 2p^2
    model: str = "two-blobs-2d"
    blob_contact: bool = True
    transfer: str = "bounds"
    sigma_target: float = 1.0
    sigma_background: float = 0.1
    noise_pct: float = 5.0
    missing_pct: float = 25.0
    completion: str = "gradient"
    patch_mode: str = "hull"
    eta_mode: str = "known_noise"
    eta_fixed: float | None = None
    variant: str = "iii"
    stop: str = "a"
    fit_distribution: str | None = None  # None = variant default
    control_distribution: str | None = None
    seed: int = 0
    kappa: float = 0.9
    r: int | None = None  # default 20 for bounds, 5 for level_set
    pcg_tol: float = 1e-3
    t0: int = 100
    max_iter: int = 50
    rho_factor: float = 1.0
    forward_tol: float = 1e-8
    data_tol: float = 1e-10
    preconditioner: str = "jacobi"
    data_preconditioner: str = "jacobi"
    levelset_amplitude: float = 20.0
    raster_path: str | None = None
    trace_misfit: bool = True

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if not 0.0 <= self.noise_pct < 100.0:
            raise ValueError(f"noise_pct must be in [0, 100), got {self.noise_pct}")
        if not 0.0 <= self.missing_pct < 100.0:
            raise ValueError(f"missing_pct must be in [0, 100), got {self.missing_pct}")
        if not self.sigma_target > self.sigma_background > 0.0:
            raise ValueError("need sigma_target > sigma_background > 0")
        if self.model not in MODEL_IDS:
            raise ValueError(f"unknown model {self.model!r}")
        if self.completion not in COMPLETION_KINDS:
            raise ValueError(f"unknown completion kind {self.completion!r}")
        if self.transfer not in ("bounds", "level_set"):
            raise ValueError(f"unknown transfer kind {self.transfer!r}")
        if self.stop not in STOP_RULES:
            raise ValueError(f"stop must be 'a' (hard) or 'b' (relaxed), got {self.stop!r}")
        if self.variant not in ("i", "ii", "iii"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.eta_mode not in ("known_noise", "fixed"):
            raise ValueError(f"unknown eta_mode {self.eta_mode!r}")
        if self.eta_mode == "fixed" and (self.eta_fixed is None or self.eta_fixed <= 0):
            raise ValueError("eta_mode=fixed needs a positive eta_fixed")
        if self.p < 1:
            raise ValueError("need at least one source position")
        if self.r is None:
            # the aggressive truncation budget suits the bounds transfer;
            # the level-set parametrization takes a much smaller one
            self.r = 20 if self.transfer == "bounds" else 5
        if self.r < 1:
            raise ValueError("PCG iteration limit must be at least 1")

    def echo(self) -> dict:
        out = {}
        for f in fields(self):
            out[f.name] = getattr(self, f.name)
        return out

    @property
    def n_experiments(self) -> int:
        if self.dim == 2:
            return self.p**2
        return (4 if self.borehole_directed else 2) * self.p**2

    def solver_options(self) -> dict:
        return {"tol": self.forward_tol, "preconditioner": self.preconditioner}


def source_layout(spec: ExperimentSpec, grid: Grid, scale: int = 1):
    """Source/sink node ids on ``grid`` (scale=2 for the data-generation grid).

    2D: p positions on the left edge paired with p sink positions on the
    right edge in every combination (s = p^2). 3D: four boreholes down the
    vertical edges of the cube; sources and sinks at opposing boreholes in
    every combination (both orientations when directed, s = 4 p^2;
    undirected pairs give s = 2 p^2, the natural full-scale layout at
    p = n - 1). Borehole-surface intersection nodes carry no sources.
    """
    n = spec.n
    offs = np.linspace(1, n - 1, spec.p).round().astype(int)
    if np.unique(offs).size != spec.p:
        raise ValueError(f"cannot place {spec.p} distinct sources on {n - 1} interior nodes")
    src, snk = [], []
    if spec.dim == 2:
        for ya in offs:
            for yb in offs:
                src.append(grid.node_index((0, scale * ya)))
                snk.append(grid.node_index((scale * n, scale * yb)))
    else:
        m = scale * n
        a, b, c, d = (0, 0), (m, 0), (m, m), (0, m)
        pairs = ((a, c), (c, a), (b, d), (d, b)) if spec.borehole_directed else ((a, c), (b, d))
        for ea, eb in pairs:
            for za in offs:
                for zb in offs:
                    src.append(grid.node_index((ea[0], ea[1], scale * za)))
                    snk.append(grid.node_index((eb[0], eb[1], scale * zb)))
    return np.array(src), np.array(snk)


def receiver_layout(spec: ExperimentSpec, grid: Grid) -> np.ndarray:
    """Union receiver node ids: top+bottom edges in 2D, top face in 3D."""
    if spec.dim == 2:
        top = segment_interior_nodes(grid, grid.segments["top"])
        bottom = segment_interior_nodes(grid, grid.segments["bottom"])
        return np.sort(np.concatenate([top, bottom]))
    return np.sort(segment_interior_nodes(grid, grid.segments["top"]))


def _coarse_to_fine_nodes(coarse: Grid, fine: Grid, ids: np.ndarray) -> np.ndarray:
    multi = coarse.node_multi(ids)
    return fine.node_index(tuple(2 * m for m in multi))


def _true_model(spec: ExperimentSpec, grid: Grid) -> np.ndarray:
    raster = None
    if spec.model == "custom":
        if spec.raster_path is None:
            raise ValueError("custom model requires raster_path")
        raster = io.read_model_raster(spec.raster_path)
        if raster.shape != grid.cell_shape:
            raise ValueError(
                f"custom raster shape {raster.shape} does not match grid {grid.cell_shape}"
            )
    return make_true_model(
        grid, spec.model,
        sigma_target=spec.sigma_target,
        sigma_background=spec.sigma_background,
        contact=spec.blob_contact,
        raster=raster,
    )


@dataclass
class Dataset:
    """One noisy, knocked-out data realization plus its ground truth."""

    spec: ExperimentSpec
    grid: Grid
    experiments: ExperimentSet
    noisy_full: np.ndarray  # (l, s) including knocked-out entries
    mask: np.ndarray  # (l, s) True where kept
    sd: float
    sigma_true_coarse: np.ndarray
    sigma_true_fine: np.ndarray = field(repr=False, default=None)


def generate_data(spec: ExperimentSpec, rng_hub: RngHub) -> Dataset:
    """Generate data on the 2x-fine grid, add noise, knock out entries.

    The knockout count per experiment is exactly
    round(missing_pct/100 * |union|), drawn uniformly without replacement,
    so the completed fraction (and with it the tolerance inflation) is the
    configured percentage exactly when it divides the receiver count.
    Solves performed here are never charged to any inversion counter.
    """
    coarse = build_grid(spec.dim, spec.n)
    fine = build_grid(spec.dim, 2 * spec.n)
    sigma_fine = _true_model(spec, fine)
    sigma_coarse = _true_model(spec, coarse)

    src_c, snk_c = source_layout(spec, coarse, scale=1)
    src_f, snk_f = source_layout(spec, fine, scale=2)
    lam_c = receiver_layout(spec, coarse)
    lam_f = _coarse_to_fine_nodes(coarse, fine, lam_c)
    s = src_c.size
    l = lam_c.size

    op = assemble(fine, sigma_fine)
    rhs = np.zeros((fine.n_nodes, s))
    rhs[src_f, np.arange(s)] = 1.0
    rhs[snk_f, np.arange(s)] -= 1.0
    U = solve_many(op, rhs, tol=spec.data_tol, preconditioner=spec.data_preconditioner)
    clean = U[lam_f, :]
    clean = clean - clean.mean(axis=0, keepdims=True)

    if spec.noise_pct > 0:
        sd = spec.noise_pct / 100.0 * float(np.linalg.norm(clean)) / np.sqrt(s * l)
        noisy = clean + sd * rng_hub.stream("noise").standard_normal(clean.shape)
    else:
        sd = 0.0
        noisy = clean.copy()

    k_miss = int(round(spec.missing_pct / 100.0 * l))
    if l - k_miss < 2:
        raise ValueError(
            f"missing_pct={spec.missing_pct} leaves fewer than 2 of {l} receivers"
        )
    mask = np.ones((l, s), dtype=bool)
    knock_rng = rng_hub.stream("knockout")
    for i in range(s):
        if k_miss:
            mask[knock_rng.choice(l, size=k_miss, replace=False), i] = False

    receivers = [lam_c[mask[:, i]] for i in range(s)]
    data = [noisy[mask[:, i], i] for i in range(s)]
    if spec.eta_mode == "fixed":
        eta = np.full(s, float(spec.eta_fixed))
    else:
        eta = np.array([r.size * sd**2 for r in receivers])
    experiments = ExperimentSet(
        grid=coarse, src_nodes=src_c, snk_nodes=snk_c, receivers=receivers,
        data=data, lam_union=lam_c, eta=eta, sd=sd if sd > 0 else None,
    )
    experiments.validate()
    return Dataset(
        spec=spec, grid=coarse, experiments=experiments, noisy_full=noisy,
        mask=mask, sd=sd, sigma_true_coarse=sigma_coarse, sigma_true_fine=sigma_fine,
    )


def build_transfer(spec: ExperimentSpec, grid: Grid, sigma_true: np.ndarray) -> TransferFunction:
    """Transfer function from the true model's value range, then forget it."""
    if spec.transfer == "level_set":
        return level_set_transfer(spec.sigma_background, spec.sigma_target, grid.h[0])
    return bounds_transfer(float(sigma_true.min()) / 1.2, 1.2 * float(sigma_true.max()))


def model_error(sigma: np.ndarray, sigma_ref: np.ndarray) -> float:
    """Relative error of log-conductivities (the displayed quantity)."""
    a, b = np.log(sigma).ravel(), np.log(sigma_ref).ravel()
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


@dataclass
class ArmResult:
    name: str
    variant: str
    stop: str
    m: np.ndarray
    sigma: np.ndarray
    runlog: RunLog
    total_solves: int
    misfit_trace: list[tuple]
    model_err: float
    completion: CompletionResult | None = None


def run_arm(
    dataset: Dataset,
    variant: str,
    stop: str,
    name: str | None = None,
    out_dir=None,
    completed: ExperimentSet | None = None,
) -> ArmResult:
    """One inversion arm on a dataset; optionally writes its artifacts.

    ``completed`` short-circuits the completion stage with a precomputed
    shared-receiver set (e.g. loaded from a ``complete`` run); otherwise the
    data is completed here per the spec settings.
    """
    spec = dataset.spec
    grid = dataset.grid
    original = dataset.experiments
    tf = build_transfer(spec, grid, dataset.sigma_true_coarse)
    m0 = initial_guess(grid, tf, amplitude_scale=spec.levelset_amplitude)
    solver = spec.solver_options()

    completion = None
    if variant == "i":
        fit_set = control_set = original
    else:
        if completed is not None:
            fit_set = completed
        else:
            etas = None
            if spec.eta_mode == "fixed":
                etas = np.full(original.n_experiments, float(spec.eta_fixed))
            completion = complete_all(
                original, spec.completion, etas=etas, mode=spec.patch_mode
            )
            fit_set = completion.experiments
        control_set = fit_set if variant == "ii" else original

    rho = spec.rho_factor * float(np.sum(original.eta))
    overrides = {}
    # distribution overrides only make sense on the completion arm; the
    # RS arm's data admits random_subset alone
    if variant != "i":
        if spec.fit_distribution is not None:
            overrides["fit_distribution"] = spec.fit_distribution
        if variant == "ii" and spec.control_distribution is not None:
            overrides["control_distribution"] = spec.control_distribution
    cfg = VariantConfig.for_variant(
        variant, STOP_RULES[stop], rho=rho, kappa=spec.kappa, t0=spec.t0,
        r=spec.r, pcg_tol=spec.pcg_tol, max_iter=spec.max_iter, **overrides,
    )
    counter = SolveCounter()
    cache = OperatorCache(grid, tf)
    trace: list[tuple] = []
    hook = None
    if spec.trace_misfit:
        trace_counter = SolveCounter()  # plotting work, never charged

        def hook(n, m):
            op, _ = cache.at(m)
            phi = ForwardResiduals(op, original, trace_counter, **solver).full_misfit()
            trace.append((n, counter.count, float(np.sqrt(phi))))

    rng = RngHub(spec.seed)
    m_final, runlog = run(
        cfg, grid, tf, fit_set, control_set, m0, rng, counter,
        solver=solver, trace_hook=hook, cache=cache,
    )
    sigma = tf.sigma(m_final)
    result = ArmResult(
        name=name or variant,
        variant=variant,
        stop=stop,
        m=m_final,
        sigma=sigma,
        runlog=runlog,
        total_solves=counter.count,
        misfit_trace=trace,
        model_err=model_error(sigma, dataset.sigma_true_coarse),
        completion=completion,
    )
    if out_dir is not None:
        write_arm(result, dataset, out_dir)
    return result


def write_arm(result: ArmResult, dataset: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.runlog.write_csv(out / "run_log.csv")
    io.write_misfit_table(result.misfit_trace, out / "misfit_vs_solves.csv")
    io.emit_model_raster(
        result.sigma.reshape(dataset.grid.cell_shape), out / "model.txt"
    )
    if result.completion is not None:
        io.write_completion_csv(result.completion.entries, out / "completion.csv")
    events: dict[str, int] = {}
    for row in result.runlog.rows:
        events[row.event] = events.get(row.event, 0) + 1
    io.write_json(
        {
            "arm": result.name,
            "variant": result.variant,
            "stop": result.stop,
            "config": _jsonable(result.runlog.config_echo),
            "termination_reason": result.runlog.termination_reason,
            "total_solves": result.total_solves,
            "iterations": len(result.runlog.rows),
            "event_counts": events,
            "model_error": result.model_err,
        },
        out / "meta.json",
    )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def comparison_variant(spec: ExperimentSpec) -> str:
    """Completed-data arm paired against random subset in comparisons."""
    if spec.variant in ("ii", "iii"):
        return spec.variant
    return "ii" if spec.stop == "b" else "iii"


def run_example(spec: ExperimentSpec, out_dir) -> dict:
    """Generate one data realization and run both comparison arms on it.

    Writes dataset, per-arm artifacts (run log, misfit-vs-solves table,
    model raster, completion records) and a summary; returns the summary.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = RngHub(spec.seed)
    dataset = generate_data(spec, rng)
    io.save_dataset(
        out / "dataset.npz", _jsonable(spec.echo()), dataset.experiments,
        dataset.noisy_full, dataset.mask, dataset.sigma_true_coarse,
    )
    io.emit_model_raster(
        dataset.sigma_true_coarse.reshape(dataset.grid.cell_shape),
        out / "true_model.txt",
    )

    dc_variant = comparison_variant(spec)
    arm_rs = run_arm(dataset, "i", spec.stop, name="rs", out_dir=out / "arm_rs")
    arm_dc = run_arm(dataset, dc_variant, spec.stop, name="dc", out_dir=out / "arm_dc")

    summary = {
        "spec": _jsonable(spec.echo()),
        "sd": dataset.sd,
        "arms": {
            arm.name: {
                "variant": arm.variant,
                "stop": arm.stop,
                "total_solves": arm.total_solves,
                "model_error": arm.model_err,
                "termination_reason": arm.runlog.termination_reason,
                "iterations": len(arm.runlog.rows),
            }
            for arm in (arm_rs, arm_dc)
        },
        "solve_ratio_dc_over_rs": arm_dc.total_solves / max(arm_rs.total_solves, 1),
    }
    if arm_dc.completion is not None:
        summary["completion"] = {
            "missing_fraction": arm_dc.completion.missing_fraction,
            "rho_factor": arm_dc.completion.rho_factor,
        }
    io.write_json(summary, out / "summary.json")
    return summary
