"""Command line: generate data, complete it, invert, compare arms, report.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io
from .completion import CompletionError, complete_all
from .config import ConfigError, spec_from_sources
from .forward import SolverError
from .harness import (
    Dataset,
    ExperimentSpec,
    generate_data,
    run_arm,
    run_example,
)
from .inversion import StagnationError
from .rng import RngHub

NUMERICAL_ERRORS = (SolverError, StagnationError, CompletionError, np.linalg.LinAlgError)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="config file (INI sections)")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--noise", type=float, default=None, metavar="PCT")
    p.add_argument("--missing", type=float, default=None, metavar="PCT")
    p.add_argument("--grid", type=int, default=None, metavar="N")
    p.add_argument("--sources", type=int, default=None, metavar="P")
    p.add_argument("--variant", choices=("i", "ii", "iii"), default=None)
    p.add_argument("--stop", choices=("a", "b"), default=None)
    p.add_argument("--completion", choices=("gradient", "laplacian"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcinv",
        description="Stochastic DC-resistivity inversion with boundary data completion",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="generate a synthetic dataset")
    _add_common(p_gen)
    _add_spec_flags(p_gen)

    p_comp = sub.add_parser("complete", help="complete a dataset to shared receivers")
    _add_common(p_comp)
    _add_spec_flags(p_comp)
    p_comp.add_argument("--data", type=Path, default=None,
                        help="dataset.npz (default: <out>/dataset.npz)")

    p_inv = sub.add_parser("invert", help="run one inversion arm")
    _add_common(p_inv)
    _add_spec_flags(p_inv)
    p_inv.add_argument("--data", type=Path, default=None,
                       help="directory holding dataset.npz (default: <out>)")

    p_cmp = sub.add_parser("compare", help="run paired RS and completion arms")
    _add_common(p_cmp)
    _add_spec_flags(p_cmp)

    p_rep = sub.add_parser("report", help="summarize a finished run directory")
    p_rep.add_argument("--run", type=Path, required=True)
    p_rep.add_argument("--out", type=Path, default=None, help="write table here (else stdout)")
    return parser


def _spec_from_args(args) -> ExperimentSpec:
    overrides = {
        "seed": getattr(args, "seed", None),
        "noise_pct": getattr(args, "noise", None),
        "missing_pct": getattr(args, "missing", None),
        "n": getattr(args, "grid", None),
        "p": getattr(args, "sources", None),
        "variant": getattr(args, "variant", None),
        "stop": getattr(args, "stop", None),
        "completion": getattr(args, "completion", None),
    }
    return spec_from_sources(args.config, overrides)


def _load_dataset_dir(spec: ExperimentSpec, data_path: Path) -> Dataset:
    spec_echo, experiments, noisy, mask, sigma_true = io.load_dataset(data_path)
    return Dataset(
        spec=spec, grid=experiments.grid, experiments=experiments,
        noisy_full=noisy, mask=mask,
        sd=experiments.sd if experiments.sd is not None else 0.0,
        sigma_true_coarse=sigma_true,
    )


def cmd_generate(args) -> int:
    spec = _spec_from_args(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    dataset = generate_data(spec, RngHub(spec.seed))
    io.save_dataset(
        out / "dataset.npz", spec.echo(), dataset.experiments,
        dataset.noisy_full, dataset.mask, dataset.sigma_true_coarse,
    )
    io.emit_model_raster(
        dataset.sigma_true_coarse.reshape(dataset.grid.cell_shape), out / "true_model.txt"
    )
    print(f"dataset: {dataset.experiments.n_experiments} experiments, "
          f"{dataset.experiments.lam_union.size} union receivers, sd={dataset.sd:.6g}")
    print(f"wrote {out / 'dataset.npz'}")
    return 0


def cmd_complete(args) -> int:
    spec = _spec_from_args(args)
    data_path = args.data or (args.out / "dataset.npz")
    if not data_path.exists():
        raise ConfigError(f"dataset not found: {data_path}")
    dataset = _load_dataset_dir(spec, data_path)
    etas = None
    if spec.eta_mode == "fixed":
        etas = np.full(dataset.experiments.n_experiments, float(spec.eta_fixed))
    result = complete_all(dataset.experiments, spec.completion, etas=etas,
                          mode=spec.patch_mode)
    args.out.mkdir(parents=True, exist_ok=True)
    io.save_completed(args.out / "completed.npz", result.experiments, result.rho_factor)
    io.write_completion_csv(result.entries, args.out / "completion.csv")
    print(f"completed {result.experiments.n_experiments} experiments; "
          f"missing fraction {result.missing_fraction:.4f}, "
          f"tolerance factor {result.rho_factor:.4f}")
    return 0


def cmd_invert(args) -> int:
    spec = _spec_from_args(args)
    data_dir = args.data or args.out
    data_path = data_dir / "dataset.npz" if data_dir.is_dir() else data_dir
    if not data_path.exists():
        raise ConfigError(f"dataset not found: {data_path}")
    dataset = _load_dataset_dir(spec, data_path)
    completed = None
    completed_path = data_path.parent / "completed.npz"
    if spec.variant != "i" and completed_path.exists():
        completed, _ = io.load_completed(completed_path)
    result = run_arm(dataset, spec.variant, spec.stop, name=spec.variant,
                     out_dir=args.out, completed=completed)
    print(f"variant ({spec.variant},{spec.stop}): {result.total_solves} solves, "
          f"{len(result.runlog.rows)} iterations, "
          f"terminated: {result.runlog.termination_reason}, "
          f"model error {result.model_err:.4f}")
    return 0


def cmd_compare(args) -> int:
    spec = _spec_from_args(args)
    summary = run_example(spec, args.out)
    rs, dc = summary["arms"]["rs"], summary["arms"]["dc"]
    print(f"random subset   (i,{spec.stop}): {rs['total_solves']} solves, "
          f"model error {rs['model_error']:.4f} [{rs['termination_reason']}]")
    print(f"data completion ({dc['variant']},{spec.stop}): {dc['total_solves']} solves, "
          f"model error {dc['model_error']:.4f} [{dc['termination_reason']}]")
    print(f"solve ratio dc/rs: {summary['solve_ratio_dc_over_rs']:.3f}")
    return 0


def cmd_report(args) -> int:
    run_dir = args.run
    if not run_dir.exists():
        raise ConfigError(f"run directory not found: {run_dir}")
    lines = ["arm,iter,cum_solves,misfit"]
    found = False
    for arm_dir in sorted(run_dir.glob("arm_*")) or [run_dir]:
        table = arm_dir / "misfit_vs_solves.csv"
        if table.exists():
            found = True
            for it, solves, misfit in io.read_misfit_table(table):
                lines.append(f"{arm_dir.name},{it},{solves},{misfit!r}")
    if not found:
        raise ConfigError(f"no misfit_vs_solves.csv under {run_dir}")
    text = "\n".join(lines) + "\n"
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "complete": cmd_complete,
    "invert": cmd_invert,
    "compare": cmd_compare,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
