"""INI experiment configuration: parsing with per-field diagnostics, sweep expansion, serialization."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .influence import LissaConfig
from .loo import LooProtocol, ModelSpec
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "ExperimentSection",
    "DataSection",
    "ModelSection",
    "ArmsSection",
    "TrainSection",
    "ProtocolSection",
    "InfluenceSection",
    "EigenSection",
    "ExperimentConfig",
    "SweepCell",
    "load_config",
    "resolve_path",
    "parse_config",
    "ARMS",
]

ARMS = ("none", "weight_decay", "swa", "weight_decay+swa", "bnn")


class ConfigError(ValueError):
    """Carries one ``section.key: message`` line per problem."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


# value codecs: (parse, format)
def _opt(parse):
    return lambda s: None if s.strip().lower() in ("", "none", "full") else parse(s)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.replace(" ", "").split(",") if p)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.replace(" ", "").split(",") if p)


def _strs(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _fmt(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _test_point(s: str):
    s = s.strip()
    return s if s == "max_loss" else int(s)


def _seed(s: str) -> int:
    v = int(s)
    if not 0 <= v < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return v


def _f(default, parse, choices=None):
    return field(default=default, metadata={"parse": parse, "choices": choices})


@dataclass(frozen=True)
class ExperimentSection:
    name: str = _f("experiment", str)
    seed: int = _f(0, _seed)
    output: str = _f("runs", str)
    workers: int = _f(1, int)


@dataclass(frozen=True)
class DataSection:
    dataset: str = _f("iris", str, ("iris", "mnist", "blobs", "quadratic"))
    path: str = _f("data/iris.csv", str)
    images: str = _f("data/mnist/train-images-idx3-ubyte.gz", str)
    labels: str = _f("data/mnist/train-labels-idx1-ubyte.gz", str)
    test_images: str = _f("data/mnist/t10k-images-idx3-ubyte.gz", str)
    test_labels: str = _f("data/mnist/t10k-labels-idx1-ubyte.gz", str)
    limit: int | None = _f(5000, _opt(int))
    test_limit: int | None = _f(1000, _opt(int))
    test_fraction: float = _f(0.2, float)
    standardize: bool = _f(True, _bool)
    blob_n: int = _f(150, int)
    blob_d: int = _f(4, int)
    blob_k: int = _f(3, int)
    blob_spread: float = _f(0.5, float)
    eigenvalues: tuple = _f((1.0, 2.0, 10.0), _floats)


@dataclass(frozen=True)
class ModelSection:
    family: str = _f("mlp", str, ("mlp", "bnn"))
    activation: str = _f("relu", str, ("relu", "selu"))
    widths: tuple = _f((5, 10, 20, 40), _ints)
    depths: tuple = _f((1,), _ints)
    init_logvar: float = _f(-6.0, float)
    kl_weight: float | None = _f(None, _opt(float))


@dataclass(frozen=True)
class ArmsSection:
    arms: tuple = _f(("weight_decay",), _strs)
    weight_decay: float = _f(0.005, float)


@dataclass(frozen=True)
class TrainSection:
    optimizer: str = _f("adam", str, ("adam", "gd"))
    lr: float = _f(1e-3, float)
    epochs: int = _f(60000, int)
    batch_size: int | None = _f(None, _opt(int))
    plateau_patience: int = _f(100, int)
    plateau_factor: float = _f(0.1, float)
    min_lr: float = _f(1e-7, float)
    swa_start_epoch: int | None = _f(None, _opt(int))


@dataclass(frozen=True)
class ProtocolSection:
    selection: str = _f("top_loss", str, ("top_loss", "top_influence"))
    k: int = _f(40, int)
    retrain: str = _f("from_optimal", str, ("from_optimal", "from_scratch"))
    finetune_epochs: int = _f(7500, int)
    finetune_lr: float | None = _f(None, _opt(float))
    test_point: str | int = _f("max_loss", _test_point)
    repetitions: int = _f(1, int)


@dataclass(frozen=True)
class InfluenceSection:
    damping: float = _f(0.01, float)
    scope: str = _f("last_layer", str, ("last_layer", "all_params"))
    solve_method: str = _f("direct_solve", str, ("direct_solve", "lissa"))
    lissa_depth: int = _f(5000, int)
    lissa_scale: float | None = _f(None, _opt(float))
    lissa_repeats: int = _f(4, int)
    lissa_tol: float = _f(1e-10, float)
    lissa_batch_size: int | None = _f(None, _opt(int))
    indefinite: str = _f("symmetric_solve", str, ("symmetric_solve", "raise"))


@dataclass(frozen=True)
class EigenSection:
    scope: str = _f("all_params", str, ("last_layer", "all_params"))
    max_iters: int = _f(1000, int)
    tol: float = _f(1e-6, float)


SECTIONS = {
    "experiment": ExperimentSection,
    "data": DataSection,
    "model": ModelSection,
    "arms": ArmsSection,
    "train": TrainSection,
    "protocol": ProtocolSection,
    "influence": InfluenceSection,
    "eigen": EigenSection,
}


@dataclass(frozen=True)
class SweepCell:
    arm: str
    depth: int
    width: int

    @property
    def label(self) -> str:
        return f"{self.arm.replace('+', '_')}-d{self.depth}-w{self.width}"


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    arms: ArmsSection = field(default_factory=ArmsSection)
    train: TrainSection = field(default_factory=TrainSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    influence: InfluenceSection = field(default_factory=InfluenceSection)
    eigen: EigenSection = field(default_factory=EigenSection)

    def cells(self) -> list[SweepCell]:
        return [SweepCell(a, d, w if d else 0) for a in self.arms.arms for d in self.model.depths for w in (self.model.widths if d else self.model.widths[:1])]

    def train_config(self, arm: str) -> TrainConfig:
        t = self.train
        return TrainConfig(
            optimizer=t.optimizer,
            lr=t.lr,
            weight_decay=self.arms.weight_decay if arm in ("weight_decay", "weight_decay+swa") else 0.0,
            epochs=t.epochs,
            batch_size=t.batch_size,
            plateau_patience=t.plateau_patience,
            plateau_factor=t.plateau_factor,
            min_lr=t.min_lr,
            swa=arm in ("swa", "weight_decay+swa"),
            swa_start_epoch=t.swa_start_epoch,
            seed=self.experiment.seed,
        )

    def model_spec(self, cell: SweepCell) -> ModelSpec:
        m = self.model
        return ModelSpec(
            family="bnn" if cell.arm == "bnn" else m.family,
            hidden_layers=cell.depth,
            hidden_width=cell.width,
            activation=m.activation,
            train=self.train_config(cell.arm),
            init_logvar=m.init_logvar,
            kl_weight=m.kl_weight,
            arm=cell.arm,
        )

    def loo_protocol(self) -> LooProtocol:
        p, inf = self.protocol, self.influence
        lissa = None
        if inf.solve_method == "lissa":
            lissa = LissaConfig(inf.lissa_depth, inf.lissa_scale, inf.lissa_repeats, inf.lissa_tol, inf.lissa_batch_size, self.experiment.seed)
        return LooProtocol(
            selection=p.selection,
            k=p.k,
            retrain=p.retrain,
            finetune_epochs=p.finetune_epochs,
            finetune_lr=p.finetune_lr,
            test_point=p.test_point,
            repetitions=p.repetitions,
            base_seed=self.experiment.seed,
            damping=inf.damping,
            scope=inf.scope,
            solve_method=inf.solve_method,
            lissa=lissa,
            indefinite=inf.indefinite,
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, experiment=replace(self.experiment, seed=seed))

    def with_output(self, out: str) -> "ExperimentConfig":
        return replace(self, experiment=replace(self.experiment, output=out))

    def with_workers(self, n: int) -> "ExperimentConfig":
        return replace(self, experiment=replace(self.experiment, workers=n))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _check(cfg: ExperimentConfig, problems: list[str]) -> None:
    def need(cond, where, msg):
        if not cond:
            problems.append(f"{where}: {msg}")

    need(cfg.experiment.workers >= 1, "experiment.workers", "must be >= 1")
    need(0 < cfg.data.test_fraction < 1, "data.test_fraction", "must lie in (0, 1)")
    need(cfg.data.limit is None or cfg.data.limit > 0, "data.limit", "must be positive")
    need(cfg.data.test_limit is None or cfg.data.test_limit > 0, "data.test_limit", "must be positive")
    need(all(e >= 0 for e in cfg.data.eigenvalues) and len(cfg.data.eigenvalues) > 0, "data.eigenvalues", "must be a nonempty list of non-negative values")
    need(len(cfg.model.widths) > 0 and all(w >= 1 for w in cfg.model.widths), "model.widths", "must be a nonempty list of positive integers")
    need(len(cfg.model.depths) > 0 and all(d >= 0 for d in cfg.model.depths), "model.depths", "must be a nonempty list of non-negative integers")
    bad = [a for a in cfg.arms.arms if a not in ARMS]
    need(not bad and len(cfg.arms.arms) > 0, "arms.arms", f"unknown arm(s) {bad}; choose from {', '.join(ARMS)}" if bad else "must name at least one arm")
    need(cfg.arms.weight_decay >= 0, "arms.weight_decay", "must be >= 0")
    need(cfg.train.lr > 0, "train.lr", "must be > 0")
    need(cfg.train.epochs >= 1, "train.epochs", "must be >= 1")
    need(0 < cfg.train.plateau_factor < 1, "train.plateau_factor", "must lie in (0, 1)")
    need(cfg.train.plateau_patience >= 1, "train.plateau_patience", "must be >= 1")
    need(cfg.train.min_lr >= 0, "train.min_lr", "must be >= 0")
    need(cfg.train.batch_size is None or cfg.train.batch_size >= 1, "train.batch_size", "must be positive or 'full'")
    need(cfg.protocol.k >= 1, "protocol.k", "must be >= 1")
    need(cfg.protocol.repetitions >= 1, "protocol.repetitions", "must be >= 1")
    need(cfg.protocol.finetune_epochs >= 0, "protocol.finetune_epochs", "must be >= 0")
    need(cfg.influence.damping >= 0, "influence.damping", "must be >= 0")
    need(cfg.influence.lissa_scale is None or cfg.influence.lissa_scale > 0, "influence.lissa_scale", "must be > 0")
    need(cfg.eigen.max_iters >= 1, "eigen.max_iters", "must be >= 1")
    need(cfg.eigen.tol > 0, "eigen.tol", "must be > 0")


def parse_config(text: str, base_dir: Path | None = None, check_files: bool = True) -> ExperimentConfig:
    """Parse INI text. Unknown sections or keys and bad values are all reported at once."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from None
    problems: list[str] = []
    for name in cp.sections():
        if name not in SECTIONS:
            problems.append(f"{name}: unknown section")
    built = {}
    for name, cls in SECTIONS.items():
        values = {}
        known = {f.name: f for f in fields(cls)}
        if cp.has_section(name):
            for key, raw in cp.items(name):
                f = known.get(key)
                if f is None:
                    problems.append(f"{name}.{key}: unknown key")
                    continue
                try:
                    val = f.metadata["parse"](raw)
                except (ValueError, TypeError) as exc:
                    problems.append(f"{name}.{key}: cannot parse {raw!r} ({exc})")
                    continue
                choices = f.metadata.get("choices")
                if choices and val not in choices:
                    problems.append(f"{name}.{key}: {val!r} is not one of {', '.join(choices)}")
                    continue
                values[key] = val
        built[name] = cls(**values)
    cfg = ExperimentConfig(**built)
    _check(cfg, problems)
    if check_files:
        d = cfg.data
        paths = {"iris": [("data.path", d.path)], "mnist": [("data.images", d.images), ("data.labels", d.labels), ("data.test_images", d.test_images), ("data.test_labels", d.test_labels)]}
        for where, p in paths.get(d.dataset, []):
            full = resolve_path(p, base_dir)
            if not full.exists():
                problems.append(f"{where}: file not found: {full}")
    if problems:
        raise ConfigError(problems)
    return cfg


def resolve_path(p: str, config_dir: Path | None = None) -> Path:
    """Absolute paths pass through; relative ones resolve against the working
    directory, then against the config file's directory."""
    path = Path(p)
    if path.is_absolute():
        return path
    if (Path.cwd() / path).exists() or config_dir is None:
        return Path.cwd() / path
    return Path(config_dir) / path


def load_config(path, check_files: bool = True) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config: file not found: {path}"])
    return parse_config(path.read_text(), path.parent.resolve(), check_files)
