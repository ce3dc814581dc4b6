"""Config-file handling: flat key=value text with sections (INI style).

Every recognized key maps to one :class:`~dcinv.harness.ExperimentSpec`
field; command-line flags override file values. Unknown keys are rejected
so typos never silently fall back to defaults.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from .harness import ExperimentSpec


class ConfigError(Exception):
    pass


def _parse_bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_float(text: str):
    return None if text.strip() == "" else float(text)


def _parse_optional_str(text: str):
    return None if text.strip() == "" else text.strip()


# "section.key" -> (ExperimentSpec field, parser)
CONFIG_KEYS = {
    "experiment.dim": ("dim", int),
    "experiment.grid_n": ("n", int),
    "experiment.sources_p": ("p", int),
    "experiment.borehole_directed": ("borehole_directed", _parse_bool),
    "experiment.model": ("model", str),
    "experiment.blob_contact": ("blob_contact", _parse_bool),
    "experiment.sigma_target": ("sigma_target", float),
    "experiment.sigma_background": ("sigma_background", float),
    "experiment.noise_pct": ("noise_pct", float),
    "experiment.missing_pct": ("missing_pct", float),
    "experiment.seed": ("seed", int),
    "experiment.raster_path": ("raster_path", _parse_optional_str),
    "transfer.kind": ("transfer", str),
    "transfer.levelset_amplitude": ("levelset_amplitude", float),
    "completion.kind": ("completion", str),
    "completion.eta_mode": ("eta_mode", str),
    "completion.eta_fixed": ("eta_fixed", _parse_optional_float),
    "completion.patch_mode": ("patch_mode", str),
    "inversion.variant": ("variant", str),
    "inversion.stop": ("stop", str),
    "inversion.fit_distribution": ("fit_distribution", _parse_optional_str),
    "inversion.control_distribution": ("control_distribution", _parse_optional_str),
    "inversion.kappa": ("kappa", float),
    "inversion.r": ("r", int),
    "inversion.pcg_tol": ("pcg_tol", float),
    "inversion.t0": ("t0", int),
    "inversion.max_iter": ("max_iter", int),
    "inversion.rho_factor": ("rho_factor", float),
    "solver.forward_tol": ("forward_tol", float),
    "solver.data_tol": ("data_tol", float),
    "solver.preconditioner": ("preconditioner", str),
    "solver.data_preconditioner": ("data_preconditioner", str),
    "output.trace_misfit": ("trace_misfit", _parse_bool),
}


def load_config(path) -> dict:
    """Read a config file into {"section.key": raw string} entries."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    flat = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[f"{section}.{key}"] = value
    return flat


def spec_from_sources(config_path=None, overrides: dict | None = None) -> ExperimentSpec:
    """Build an ExperimentSpec from a config file plus field overrides.

    ``overrides`` maps spec field names to already-typed values (CLI flags).
    """
    kwargs = {}
    if config_path is not None:
        flat = load_config(config_path)
        for key, raw in flat.items():
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            field_name, parse = CONFIG_KEYS[key]
            try:
                kwargs[field_name] = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
    for name, value in (overrides or {}).items():
        if value is not None:
            kwargs[name] = value
    try:
        return ExperimentSpec(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
