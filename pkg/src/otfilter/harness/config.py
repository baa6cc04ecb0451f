"""Experiment configuration files.

A config is an INI file read with :mod:`configparser`::

    [experiment]     name, task, seeds, steps, snapshot_stride, eval_start, out
    [model]          system block (see MODEL_FIELDS)
    [reference]      kind = sir | oracle | none, n_particles, subsample
    [metrics]        kinds, cap, bandwidth, sign_threshold
    [rate]           sizes, dim, obs_dim   (task = rate_study only)
    [filter NAME]    kind, n_particles and any TrainConfig field

``task`` is one of ``filtering`` (sequential run against a truth
trajectory), ``bimodal`` (single analysis step of the squared-observation
model) or ``rate_study`` (quadratic semidual error vs sample size).
Lists are whitespace separated. Every section and key is checked; unknown
ones are reported together with all other problems in one
:class:`~otfilter.exceptions.ConfigError`.
"""

import configparser
import dataclasses
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..cot import TrainConfig
from ..exceptions import ConfigError
from ..filters import FILTER_KINDS

TASKS = ("filtering", "bimodal", "rate_study")
SYSTEMS = ("lorenz63", "lorenz96", "squared", "linear")
REFERENCE_KINDS = ("sir", "oracle", "none")
METRIC_KINDS = ("W1", "W2", "MMD", "MSE", "both_signs", "monotone_violation", "map_l2")
STATIC_KINDS = ("ot", "enkf", "sir")


@dataclass
class ModelSpec:
    system: str = "lorenz63"
    state_dim: int = 3
    dims: tuple = ()
    dt: float = 0.01
    sigma_proc: float = math.sqrt(0.1)
    obs_index: tuple = (3,)
    obs_var: float = 10.0
    init_mean: float = 0.0
    init_var: float = 100.0
    truth_init_mean: float = None
    truth_init_var: float = None
    truth_noise: bool = None
    forcing: float = 8.0
    sigma: float = 0.1
    y_obs: float = 1.0
    transition: float = 0.9


@dataclass
class ReferenceSpec:
    kind: str = "none"
    n_particles: int = 10000
    subsample: int = 250


@dataclass
class MetricsSpec:
    kinds: tuple = ("MSE",)
    cap: int = 512
    bandwidth: float = None
    sign_threshold: float = 0.05


@dataclass
class RateSpec:
    sizes: tuple = (250, 500, 1000, 2000, 4000)
    dim: int = 2
    obs_dim: int = 1


@dataclass
class FilterSpec:
    name: str
    kind: str
    n_particles: int = 250
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class ExperimentConfig:
    name: str
    task: str = "filtering"
    seeds: tuple = (0,)
    steps: int = 100
    snapshot_stride: int = 10
    eval_start: int = 1
    out: str = ""
    model: ModelSpec = field(default_factory=ModelSpec)
    reference: ReferenceSpec = field(default_factory=ReferenceSpec)
    metrics: MetricsSpec = field(default_factory=MetricsSpec)
    rate: RateSpec = field(default_factory=RateSpec)
    filters: tuple = ()

    def filter(self, name):
        for f in self.filters:
            if f.name == name:
                return f
        raise KeyError(name)

    def select(self, seeds=None, filters=None):
        """Copy restricted to the given seeds and filter names."""
        out = dataclasses.replace(self)
        if seeds is not None:
            out.seeds = tuple(int(s) for s in seeds)
        if filters is not None:
            names = set(filters)
            unknown = names - {f.name for f in self.filters}
            if unknown:
                raise ConfigError([f"unknown filter {n!r}" for n in sorted(unknown)])
            out.filters = tuple(f for f in self.filters if f.name in names)
        problems = _semantic(out)
        if problems:
            raise ConfigError(problems)
        return out


# field -> parser; "list:int" etc. parse whitespace-separated lists
EXPERIMENT_FIELDS = {"name": "str", "task": "str", "seeds": "list:int", "steps": "int",
                     "snapshot_stride": "int", "eval_start": "int", "out": "str"}
MODEL_FIELDS = {"system": "str", "state_dim": "int", "dims": "list:int", "dt": "float",
                "sigma_proc": "float", "obs_index": "list:int", "obs_var": "float",
                "init_mean": "float", "init_var": "float", "truth_init_mean": "float?",
                "truth_init_var": "float?", "truth_noise": "bool?", "forcing": "float",
                "sigma": "float", "y_obs": "float", "transition": "float"}
REFERENCE_FIELDS = {"kind": "str", "n_particles": "int", "subsample": "int"}
METRICS_FIELDS = {"kinds": "list:str", "cap": "int", "bandwidth": "float?", "sign_threshold": "float"}
RATE_FIELDS = {"sizes": "list:int", "dim": "int", "obs_dim": "int"}
TRAIN_FIELDS = {"iterations": "int", "lr_psi": "float", "lr_T": "float", "lambda_T": "float",
                "lambda_psi": "float", "psi_steps": "int", "T_steps": "int", "elu_alpha": "float",
                "decay": "float", "min_iterations": "int", "warm_start": "bool",
                "pair_batch": "int?", "penalty_batch": "int?", "hidden": "list:int",
                "beta1": "float", "beta2": "float", "eps": "float", "trace_every": "int",
                "seed": "int"}
FILTER_FIELDS = {"kind": "str", "n_particles": "int", "lr": "float", "lambda": "float", **TRAIN_FIELDS}

SECTIONS = {"experiment": EXPERIMENT_FIELDS, "model": MODEL_FIELDS, "reference": REFERENCE_FIELDS,
            "metrics": METRICS_FIELDS, "rate": RATE_FIELDS}


def _parse(kind, text):
    text = text.strip()
    if kind.endswith("?"):
        if text.lower() in ("", "none"):
            return None
        kind = kind[:-1]
    if kind.startswith("list:"):
        inner = kind[5:]
        return tuple(_parse(inner, t) for t in text.replace(",", " ").split())
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return text


def _fmt(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return " ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _read_block(parser, section, fields, problems):
    values = {}
    for key, raw in parser.items(section):
        if key not in fields:
            problems.append(f"[{section}] unknown field {key!r}")
            continue
        try:
            values[key] = _parse(fields[key], raw)
        except ValueError as exc:
            problems.append(f"[{section}] {key}: {exc}")
    return values


def _build(cls, values, where, problems):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def _filter_spec(name, values, problems):
    kind = values.pop("kind", None)
    n = values.pop("n_particles", 250)
    if kind is None:
        problems.append(f"[filter {name}] missing field 'kind'")
        kind = "enkf"
    lr = values.pop("lr", None)
    if lr is not None:
        values.setdefault("lr_psi", lr)
        values.setdefault("lr_T", lr)
    lam = values.pop("lambda", None)
    if lam is not None:
        values.setdefault("lambda_T", lam)
        values.setdefault("lambda_psi", lam)
    train = _build(TrainConfig, values, f"[filter {name}]", problems) or TrainConfig()
    return FilterSpec(name, kind, n, train)


def _semantic(cfg):
    problems = []
    if cfg.task not in TASKS:
        problems.append(f"task must be one of {TASKS}, got {cfg.task!r}")
    if not cfg.seeds:
        problems.append("seeds must be nonempty")
    if not cfg.filters:
        problems.append("at least one [filter NAME] section is required")
    if cfg.steps < 1:
        problems.append("steps must be >= 1")
    if cfg.snapshot_stride < 1:
        problems.append("snapshot_stride must be >= 1")
    if not 1 <= cfg.eval_start <= max(cfg.steps, 1):
        problems.append("eval_start must lie in [1, steps]")
    m = cfg.model
    if m.system not in SYSTEMS:
        problems.append(f"model.system must be one of {SYSTEMS}, got {m.system!r}")
    if m.system == "lorenz63" and m.state_dim != 3:
        problems.append("lorenz63 has state_dim 3")
    if m.system in ("lorenz63", "lorenz96"):
        if not m.obs_index:
            problems.append("model.obs_index is required for Lorenz systems")
        elif any(i < 1 or i > m.state_dim for i in m.obs_index):
            problems.append(f"model.obs_index entries must lie in [1, {m.state_dim}]")
    if m.dt <= 0 or m.obs_var <= 0 or m.init_var <= 0 or m.sigma <= 0 or m.sigma_proc < 0:
        problems.append("model scales must be positive (sigma_proc nonnegative)")
    if cfg.task == "bimodal" and m.system != "squared":
        problems.append("task bimodal needs model.system = squared")
    if cfg.task == "bimodal" and (not m.dims or min(m.dims) < 1):
        problems.append("task bimodal needs model.dims (positive)")
    if cfg.reference.kind not in REFERENCE_KINDS:
        problems.append(f"reference.kind must be one of {REFERENCE_KINDS}")
    if cfg.reference.n_particles < 2 or cfg.reference.subsample < 2:
        problems.append("reference sizes must be >= 2")
    for k in cfg.metrics.kinds:
        if k not in METRIC_KINDS:
            problems.append(f"unknown metric {k!r}; known: {METRIC_KINDS}")
    if cfg.metrics.bandwidth is not None and cfg.metrics.bandwidth <= 0:
        problems.append("metrics.bandwidth must be > 0")
    if cfg.metrics.cap < 2:
        problems.append("metrics.cap must be >= 2")
    if cfg.task == "rate_study" and (not cfg.rate.sizes or min(cfg.rate.sizes) < 2):
        problems.append("rate.sizes must be >= 2")
    names = [f.name for f in cfg.filters]
    if len(set(names)) != len(names):
        problems.append("filter names must be unique")
    allowed = STATIC_KINDS if cfg.task == "bimodal" else ("quadratic",) if cfg.task == "rate_study" else FILTER_KINDS
    for f in cfg.filters:
        if f.kind not in allowed:
            problems.append(f"[filter {f.name}] kind must be one of {allowed} for task {cfg.task}")
        if f.n_particles < 2:
            problems.append(f"[filter {f.name}] n_particles must be >= 2")
    return problems


def parse_config(text, source="<string>"):
    """Parse and validate config text; defaults are filled in."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError([f"parse error: {exc}"]) from exc
    problems = []
    blocks = {}
    filters = []
    for section in parser.sections():
        if section in SECTIONS:
            blocks[section] = _read_block(parser, section, SECTIONS[section], problems)
        elif section.startswith("filter "):
            name = section[len("filter "):].strip()
            values = _read_block(parser, section, FILTER_FIELDS, problems)
            filters.append(_filter_spec(name, values, problems))
        else:
            problems.append(f"unknown section [{section}]")
    exp = blocks.get("experiment", {})
    if "name" not in exp:
        problems.append("[experiment] missing field 'name'")
        exp["name"] = ""
    cfg = ExperimentConfig(
        **exp,
        model=_build(ModelSpec, blocks.get("model", {}), "[model]", problems) or ModelSpec(),
        reference=_build(ReferenceSpec, blocks.get("reference", {}), "[reference]", problems) or ReferenceSpec(),
        metrics=_build(MetricsSpec, blocks.get("metrics", {}), "[metrics]", problems) or MetricsSpec(),
        rate=_build(RateSpec, blocks.get("rate", {}), "[rate]", problems) or RateSpec(),
        filters=tuple(filters),
    )
    problems.extend(_semantic(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    return parse_config(path.read_text(), source=str(path))


def dump_config(cfg):
    """Serialize with every field written out (defaults included)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    exp = {k: getattr(cfg, k) for k in EXPERIMENT_FIELDS}
    parser["experiment"] = {k: _fmt(v) for k, v in exp.items()}
    for section, obj in (("model", cfg.model), ("reference", cfg.reference), ("metrics", cfg.metrics),
                         ("rate", cfg.rate)):
        parser[section] = {k: _fmt(getattr(obj, k)) for k in SECTIONS[section]}
    for f in cfg.filters:
        block = {"kind": f.kind, "n_particles": f.n_particles}
        block.update({k: getattr(f.train, k) for k in TRAIN_FIELDS})
        parser[f"filter {f.name}"] = {k: _fmt(v) for k, v in block.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_hash(cfg):
    """Hash of the canonical serialization; identical for equivalent files."""
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


PRESET_DIR = Path(__file__).parent / "presets"


def preset_path(name):
    path = PRESET_DIR / (name if name.endswith(".cfg") else f"{name}.cfg")
    if not path.is_file():
        raise ConfigError([f"no preset named {name!r} in {PRESET_DIR}"])
    return path


def presets():
    return sorted(p.stem for p in PRESET_DIR.glob("*.cfg"))
