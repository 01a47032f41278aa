"""Experiment configuration files.

A config is an INI file (``configparser`` syntax) with these sections:

``[experiment]``
    ``mode`` (fme | fedopt | sweep, optional when given on the command line),
    ``seeds`` (comma list of integers), ``output`` (CSV path) and
    ``master_seed`` (integer, default 0).
``[task]`` (fedopt, sweep)
    ``kind`` (linear-regression | logistic-regression) plus generator
    arguments, or ``path`` to an ``.npz`` task file.
``[fedopt]`` (fedopt, sweep)
    Any ``FlConfig`` field, plus ``modulus_bits`` and ``scale_bits``.
``[fme]`` (fme)
    Protocol fields, the privacy budget (``epsilon``, ``delta``) and the
    synthetic client pool (``pool``, ``pool_size``, ``mean_norm``,
    ``sparsity``).
``[sweep]`` (sweep)
    Grid axes: any ``[fedopt]`` key with a comma list of values. ``genie``
    (bool) turns on fixed-rate selection, ``delta`` is the allowed relative
    metric drop (``inf`` allowed).

``dump_config`` writes the canonical form: sections in the order above, keys
sorted, values in their parsed representation.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .fedopt.estimators import FlConfig
from .fme import PROTOCOLS, FmeConfig
from .privacy import PrivacyBudget
from .secagg import FieldConfig

MODES = ("fme", "fedopt", "sweep")
SECTIONS = ("experiment", "task", "fedopt", "fme", "sweep")
SEED_ENV = "AUTOSKETCH_MASTER_SEED"


class ConfigError(ValueError):
    """Invalid configuration; ``keys`` lists the offending ``section.key`` names."""

    def __init__(self, message: str, keys=()):
        super().__init__(message)
        self.keys = sorted(keys)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float(text: str) -> float:
    value = float(text)
    if math.isnan(value):
        raise ValueError("nan is not allowed")
    return value


def _parse_int(text: str) -> int:
    return int(text.strip())


def _optional(parse):
    def inner(text: str):
        return None if text.strip().lower() in ("", "none") else parse(text)
    return inner


_BY_ANNOTATION = {
    "int": _parse_int,
    "float": _parse_float,
    "bool": _parse_bool,
    "str": str.strip,
    "int | None": _optional(_parse_int),
    "float | None": _optional(_parse_float),
}


def _dataclass_parsers(cls, skip=()) -> dict:
    return {f.name: _BY_ANNOTATION[f.type] for f in dataclasses.fields(cls)
            if f.name not in skip and f.type in _BY_ANNOTATION}


FIELD_KEYS = {"modulus_bits": _parse_int, "scale_bits": _parse_int}

FEDOPT_KEYS = {**_dataclass_parsers(FlConfig, skip=("field",)), **FIELD_KEYS}

FME_KEYS = {
    **_dataclass_parsers(FmeConfig, skip=("budget", "field")),
    **FIELD_KEYS,
    "epsilon": _parse_float,
    "delta": _parse_float,
    "pool": str.strip,
    "pool_size": _parse_int,
    "mean_norm": _parse_float,
    "sparsity": _parse_int,
}
FME_REQUIRED = ("protocol", "n", "d", "G", "epsilon", "delta", "beta")
FME_POOLS = ("norm", "sparse")

TASK_KEYS = {
    "kind": str.strip,
    "path": str.strip,
    "d": _parse_int,
    "num_clients": _parse_int,
    "samples_per_client": _parse_int,
    "sparsity": _parse_int,
    "signal": _parse_float,
    "label_flip": _parse_float,
    "noise": _parse_float,
    "val_size": _parse_int,
    "seed": _parse_int,
}
LOGISTIC_ONLY = ("sparsity", "signal", "label_flip")
LINEAR_ONLY = ("noise",)

EXPERIMENT_KEYS = {
    "mode": str.strip,
    "seeds": lambda text: [_parse_int(s) for s in text.split(",") if s.strip()],
    "output": str.strip,
    "master_seed": _parse_int,
}

SWEEP_FLAGS = {"genie": _parse_bool, "delta": _parse_float}


@dataclass
class ExperimentConfig:
    """Parsed and validated experiment.

    Attributes:
        mode: "fme", "fedopt" or "sweep".
        seeds: run seeds, in output order.
        output: CSV path.
        master_seed: combined with every run seed.
        task: task generator arguments, or ``{"path": ...}``.
        fedopt: ``FlConfig`` keyword arguments (fedopt and sweep).
        fme: ``[fme]`` keys (fme).
        axes: sweep axes, ordered as in the file.
        genie: select the best fixed rate per noise multiplier.
        delta: allowed relative metric drop for the genie selection.
    """

    mode: str
    seeds: list[int]
    output: str
    master_seed: int = 0
    task: dict = field(default_factory=dict)
    fedopt: dict = field(default_factory=dict)
    fme: dict = field(default_factory=dict)
    axes: dict = field(default_factory=dict)
    genie: bool = False
    delta: float = 0.01

    def fl_config(self, **overrides) -> FlConfig:
        return build_fl_config({**self.fedopt, **overrides})

    def fme_config(self) -> FmeConfig:
        return build_fme_config(self.fme)


def build_fl_config(values: dict) -> FlConfig:
    values = dict(values)
    bits = {k: values.pop(k) for k in FIELD_KEYS if k in values}
    if bits:
        values["field"] = FieldConfig(**bits)
    return FlConfig(**values)


def build_fme_config(values: dict) -> FmeConfig:
    values = {k: v for k, v in values.items() if k not in ("pool", "pool_size", "mean_norm", "sparsity")}
    budget = PrivacyBudget(values.pop("epsilon"), values.pop("delta"))
    bits = {k: values.pop(k) for k in FIELD_KEYS if k in values}
    if bits:
        values["field"] = FieldConfig(**bits)
    return FmeConfig(budget=budget, **values)


def _read_section(parser, name: str, parsers: dict, errors: dict) -> dict:
    out = {}
    if not parser.has_section(name):
        return out
    for key, text in parser.items(name):
        if key not in parsers:
            errors[f"{name}.{key}"] = "unknown key"
            continue
        try:
            out[key] = parsers[key](text)
        except ValueError as exc:
            errors[f"{name}.{key}"] = str(exc)
    return out


def _read_axes(parser, errors: dict) -> tuple[dict, dict]:
    axes, flags = {}, {}
    if not parser.has_section("sweep"):
        return axes, flags
    for key, text in parser.items("sweep"):
        if key in SWEEP_FLAGS:
            try:
                flags[key] = SWEEP_FLAGS[key](text)
            except ValueError as exc:
                errors[f"sweep.{key}"] = str(exc)
        elif key in FEDOPT_KEYS:
            try:
                values = [FEDOPT_KEYS[key](v) for v in text.split(",") if v.strip()]
            except ValueError as exc:
                errors[f"sweep.{key}"] = str(exc)
                continue
            if not values:
                errors[f"sweep.{key}"] = "empty axis"
            axes[key] = values
        else:
            errors[f"sweep.{key}"] = "unknown key"
    return axes, flags


def parse_config(text: str, mode: str | None = None, env=None) -> ExperimentConfig:
    """Parse and validate a config; every problem is reported at once.

    Args:
        text: INI source.
        mode: mode requested on the command line; must agree with the file.
        env: environment mapping for the master-seed override (defaults to
            ``os.environ``).

    Raises:
        ConfigError: with the offending keys.
    """
    env = os.environ if env is None else env
    # keys are case sensitive (G is a field name)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None

    errors: dict[str, str] = {}
    for name in parser.sections():
        if name not in SECTIONS:
            errors[name] = "unknown section"
    exp = _read_section(parser, "experiment", EXPERIMENT_KEYS, errors)
    file_mode = exp.get("mode")
    if mode is not None and file_mode is not None and mode != file_mode:
        errors["experiment.mode"] = f"file says {file_mode!r} but {mode!r} was requested"
    mode = mode or file_mode
    if mode not in MODES:
        errors["experiment.mode"] = f"mode must be one of {MODES}"
    seeds = exp.get("seeds", [0])
    if not seeds:
        errors["experiment.seeds"] = "need at least one seed"
    elif len(set(seeds)) != len(seeds):
        errors["experiment.seeds"] = "seeds must be distinct"
    if "output" not in exp:
        errors["experiment.output"] = "missing"
    master = exp.get("master_seed", 0)
    if SEED_ENV in env:
        try:
            master = int(env[SEED_ENV])
        except ValueError:
            errors[SEED_ENV] = "not an integer"

    cfg = ExperimentConfig(mode=mode or "", seeds=seeds, output=exp.get("output", ""), master_seed=master)
    if mode == "fme":
        _validate_fme(parser, cfg, errors)
    elif mode in ("fedopt", "sweep"):
        _validate_fedopt(parser, cfg, errors, sweep=mode == "sweep")
    if errors:
        detail = "; ".join(f"{k}: {v}" for k, v in sorted(errors.items()))
        raise ConfigError(f"invalid config: {detail}", errors)
    return cfg


def _unexpected_sections(parser, allowed, errors):
    for name in parser.sections():
        if name in SECTIONS and name not in allowed:
            errors[name] = "section not used in this mode"


def _validate_fme(parser, cfg: ExperimentConfig, errors: dict):
    _unexpected_sections(parser, ("experiment", "fme"), errors)
    values = _read_section(parser, "fme", FME_KEYS, errors)
    for key in FME_REQUIRED:
        if key not in values and f"fme.{key}" not in errors:
            errors[f"fme.{key}"] = "missing"
    if values.get("protocol") == "adapt-tail-topk" and "gamma_sparse" not in values:
        errors["fme.gamma_sparse"] = "required by adapt-tail-topk"
    pool = values.setdefault("pool", "norm" if values.get("protocol", "adapt-norm") == "adapt-norm" else "sparse")
    if pool not in FME_POOLS:
        errors["fme.pool"] = f"must be one of {FME_POOLS}"
    values.setdefault("mean_norm", 0.5 * values.get("G", 1.0))
    values.setdefault("sparsity", 8)
    values.setdefault("pool_size", 2 * values.get("n", 1) * _rounds_needed(values))
    cfg.fme = values
    if not any(k.startswith("fme.") for k in errors):
        try:
            cfg.fme_config()
        except (TypeError, ValueError) as exc:
            errors["fme"] = str(exc)
        if values["pool_size"] < values["n"] * _rounds_needed(values) or values["pool_size"] % 2:
            errors["fme.pool_size"] = "must be even and cover one fresh cohort per round"
        if not 0 <= values["mean_norm"] <= values["G"]:
            errors["fme.mean_norm"] = "must lie in [0, G]"
        if not 0 <= values["sparsity"] <= values["d"]:
            errors["fme.sparsity"] = "must lie in [0, d]"


def _rounds_needed(values: dict) -> int:
    if values.get("protocol", "adapt-norm") == "adapt-norm":
        return 2
    d = values.get("d", 2)
    return max(1, math.floor(math.log(d))) if d > 1 else 1


def _validate_fedopt(parser, cfg: ExperimentConfig, errors: dict, sweep: bool):
    _unexpected_sections(parser, ("experiment", "task", "fedopt") + (("sweep",) if sweep else ()), errors)
    cfg.fedopt = _read_section(parser, "fedopt", FEDOPT_KEYS, errors)
    cfg.task = _read_section(parser, "task", TASK_KEYS, errors)
    _validate_task(cfg.task, errors)
    if sweep:
        cfg.axes, flags = _read_axes(parser, errors)
        cfg.genie = flags.get("genie", False)
        cfg.delta = flags.get("delta", 0.01)
        if not cfg.delta >= 0:
            errors["sweep.delta"] = "must be nonnegative"
        if not cfg.axes and not any(k.startswith("sweep.") for k in errors):
            errors["sweep"] = "no grid axes"
        if cfg.genie:
            estimators = cfg.axes.get("estimator", [cfg.fedopt.get("estimator", FlConfig.estimator)])
            if "dp" not in estimators:
                errors["sweep.estimator"] = "genie selection needs the uncompressed 'dp' baseline in the grid"
    if any(k.startswith(("fedopt.", "sweep.")) for k in errors) or "sweep" in errors:
        return
    points = grid_points(cfg.axes) if sweep else [{}]
    for point in points:
        try:
            cfg.fl_config(**point)
        except (TypeError, ValueError) as exc:
            bad = sorted(point) or ["fedopt"]
            for key in bad:
                errors[f"sweep.{key}" if point else "fedopt"] = str(exc)
            break


def _validate_task(task: dict, errors: dict):
    if "path" in task:
        extra = sorted(set(task) - {"path"})
        for key in extra:
            errors[f"task.{key}"] = "not allowed together with task.path"
        if not Path(task["path"]).is_file():
            errors["task.path"] = "file not found"
        return
    kind = task.get("kind")
    if kind is None:
        errors["task.kind"] = "missing (or give task.path)"
    elif kind not in ("linear-regression", "logistic-regression"):
        errors["task.kind"] = "must be linear-regression or logistic-regression"
    else:
        wrong = LINEAR_ONLY if kind == "logistic-regression" else LOGISTIC_ONLY
        for key in wrong:
            if key in task:
                errors[f"task.{key}"] = f"not used by {kind}"


def grid_points(axes: dict) -> list[dict]:
    """Cartesian product of the axes; the first axis varies slowest."""
    points = [{}]
    for key, values in axes.items():
        points = [{**p, key: v} for p in points for v in values]
    return points


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; ``parse_config(dump_config(c))`` reproduces ``c``."""
    sections = {"experiment": {"mode": cfg.mode, "seeds": cfg.seeds, "output": cfg.output,
                               "master_seed": cfg.master_seed}}
    if cfg.mode == "fme":
        sections["fme"] = cfg.fme
    else:
        sections["task"] = cfg.task
        sections["fedopt"] = cfg.fedopt
        if cfg.mode == "sweep":
            sweep = {"genie": cfg.genie, "delta": cfg.delta}
            sweep.update({k: list(v) for k, v in cfg.axes.items()})
            sections["sweep"] = sweep
    lines = []
    for name, values in sections.items():
        lines.append(f"[{name}]")
        if name == "sweep":
            keys = ["genie", "delta"] + list(cfg.axes)
        else:
            keys = sorted(values)
        lines.extend(f"{k} = {_format(values[k])}" for k in keys)
        lines.append("")
    return "\n".join(lines)
