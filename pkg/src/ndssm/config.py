"""Experiment configuration: one JSON document validated against ``config.schema.json``."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import jsonschema

from .datagen import DatasetManifest
from .errors import ConfigError
from .model import ModelConfig, TrainConfig
from .resolution import ResizeSchedule, Stage


def schema() -> dict:
    return json.loads(resources.files("ndssm").joinpath("config.schema.json").read_text())


def _alpha_in(v):
    if v is None or v == "inf":
        return math.inf
    return float(v)


def _alpha_out(v):
    return None if math.isinf(v) else v


@dataclass(frozen=True)
class KernelConfig:
    dims: int = 2
    state_size: int = 16
    rank: int = 1
    init: str = "fourier"
    method: str = "zoh"
    bidirectional: bool = True
    delta: float = 0.25
    resolutions: tuple = ((4, 4), (16, 16))
    seed: int = 0
    explicit: dict | None = None   # {"a": [[re, im], ...], "b": [...], "c": [...]} on every axis


@dataclass(frozen=True)
class BenchConfig:
    preset: str | None = "paper-fig9"
    input_shape: tuple = ()
    kernel_shape: tuple = ()
    repetitions: int = 3


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DatasetManifest = field(default_factory=DatasetManifest)
    data_files: dict | None = None      # {"train": path, "val": path} tensor containers
    train: TrainConfig = field(default_factory=TrainConfig)
    zero_shot: tuple = ()
    schedule: ResizeSchedule | None = None
    alpha: float = math.inf
    kernel: KernelConfig = field(default_factory=KernelConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    seed: int = 0
    precision: str = "f64"

    def with_overrides(self, seed=None, precision=None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if precision is not None:
            cfg = replace(cfg, precision=precision)
        return cfg

    @property
    def train_config(self) -> TrainConfig:
        return replace(self.train, alpha=self.alpha, seed=self.seed, precision=self.precision)

    @property
    def model_config(self) -> ModelConfig:
        return replace(self.model, seed=self.seed)


def _tuples(x):
    return tuple(_tuples(v) for v in x) if isinstance(x, (list, tuple)) else x


def _pick(cls, d):
    names = {f.name for f in fields(cls)}
    return {k: _tuples(v) if k not in ("explicit",) else v for k, v in d.items() if k in names}


def from_dict(doc: dict) -> ExperimentConfig:
    try:
        jsonschema.validate(doc, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    res = doc.get("resolution", {})
    sched = res.get("schedule")
    schedule = None
    if sched is not None:
        stages = tuple(Stage(resolution=tuple(s["resolution"]), epochs=s["epochs"],
                             alpha=_alpha_in(s.get("alpha")), lr_steps=s.get("lr_steps"))
                       for s in sched["stages"])
        schedule = ResizeSchedule(stages, sched.get("warmup_steps", 100))
    data = doc.get("data", {})
    try:
        return ExperimentConfig(
            model=ModelConfig(**_pick(ModelConfig, doc.get("model", {}))),
            data=DatasetManifest.from_dict(data.get("manifest", {})),
            data_files=data.get("files"),
            train=TrainConfig(**_pick(TrainConfig, doc.get("train", {}))),
            zero_shot=tuple(tuple(r) for r in res.get("zero_shot", ())),
            schedule=schedule,
            alpha=_alpha_in(doc.get("alpha")),
            kernel=KernelConfig(**_pick(KernelConfig, doc.get("kernel", {}))),
            bench=BenchConfig(**_pick(BenchConfig, doc.get("bench", {}))),
            seed=doc.get("seed", 0),
            precision=doc.get("precision", "f64"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _lists(x):
    return [_lists(v) for v in x] if isinstance(x, (list, tuple)) else x


def to_dict(cfg: ExperimentConfig) -> dict:
    model = {k: _lists(v) for k, v in asdict(cfg.model).items()}
    train = {k: _lists(v) for k, v in asdict(cfg.train).items() if k not in ("alpha", "seed", "precision")}
    res: dict = {"zero_shot": _lists(cfg.zero_shot)}
    if cfg.schedule is not None:
        res["schedule"] = {"warmup_steps": cfg.schedule.warmup_steps,
                           "stages": [{"resolution": list(s.resolution), "epochs": s.epochs,
                                       "alpha": _alpha_out(s.alpha), "lr_steps": s.lr_steps}
                                      for s in cfg.schedule.stages]}
    data: dict = {"manifest": cfg.data.to_dict()}
    if cfg.data_files is not None:
        data["files"] = dict(cfg.data_files)
    kernel = {k: _lists(v) for k, v in asdict(cfg.kernel).items()}
    bench = {k: _lists(v) for k, v in asdict(cfg.bench).items()}
    return {"model": model, "data": data, "train": train, "resolution": res,
            "alpha": _alpha_out(cfg.alpha), "kernel": kernel, "bench": bench,
            "seed": cfg.seed, "precision": cfg.precision}


# Desk-scale versions of the two zero-shot protocols: train at the low
# resolution, test at the others. cifar-like uses 4x/2x/1x ratios, celeb-like 2.5x/1.25x/1x.
PRESETS = {
    "cifar-like": {
        "model": {"depth": 3, "width": 32, "resolution": [8, 8]},
        "train": {"epochs": 10, "warmup_steps": 40},
        "resolution": {"zero_shot": [[16, 16], [32, 32]]},
        "alpha": 0.2,
    },
    "celeb-like": {
        "model": {"depth": 3, "width": 32, "resolution": [8, 8]},
        "train": {"epochs": 10, "warmup_steps": 40},
        "resolution": {"zero_shot": [[16, 16], [20, 20]]},
        "alpha": 0.2,
    },
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return from_dict(json.loads(json.dumps(PRESETS[name])))


def load_config(path) -> ExperimentConfig:
    """Read a JSON config file; ``"preset:NAME"`` selects a built-in preset instead."""
    if str(path).startswith("preset:"):
        return preset(str(path)[len("preset:"):])
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON (line {exc.lineno}, column {exc.colno}): {exc.msg}") from None
    return from_dict(doc)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
