"""Declarative run configuration, stored as TOML.

Defaults reproduce the published recipe: 224 px inputs, batch 32, base rate
1e-2, four one-epoch head-only cycles, then cycles of 1, 2, 4 and 8 epochs
with group divisors 9, 3, 1.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .dataset import SPLITS, AugmentationPolicy
from .errors import ConfigError
from .inference import DEFAULT_N_AUG
from .model import BACKBONES, BackboneSpec, HeadSpec
from .trainer import PhaseLayout, TrainConfig


@dataclass(frozen=True)
class DataConfig:
    image_root: str = "data/images"
    train_csv: str = "data/train_ground_truth.csv"
    val_csv: str = "data/val_ground_truth.csv"
    test_csv: str = "data/test_ground_truth.csv"

    def csv_for(self, split: str) -> str:
        return {"train": self.train_csv, "val": self.val_csv, "test": self.test_csv}[split]


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "resnet50"
    weights: str = ""
    weights_sha256: str = ""
    hidden_widths: tuple[int, ...] = (512, 512)
    dropout_ps: tuple[float, ...] = (0.25, 0.25, 0.5)

    def backbone_spec(self) -> BackboneSpec:
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unsupported backbone {self.backbone!r}; known: {sorted(BACKBONES)}")
        return BackboneSpec(self.backbone, BACKBONES[self.backbone].feature_channels,
                            self.weights or None, self.weights_sha256 or None)

    def head_spec(self) -> HeadSpec:
        return HeadSpec(tuple(self.hidden_widths), tuple(self.dropout_ps))


@dataclass(frozen=True)
class EvalConfig:
    tta: bool = True
    n_aug: int = DEFAULT_N_AUG


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def seed(self) -> int:
        return self.train.seed

    @property
    def output_dir(self) -> Path:
        return Path(self.train.output_dir)

    def with_overrides(self, seed: int | None = None, output: str | None = None) -> RunConfig:
        train = self.train
        if seed is not None:
            train = replace(train, seed=seed)
        if output is not None:
            train = replace(train, output_dir=str(output))
        return replace(self, train=train)

    def resolve_paths(self, base: Path) -> RunConfig:
        """Make relative data/weights/output paths relative to ``base`` (the config file's directory)."""
        def fix(p: str) -> str:
            return str(base / p) if p and not Path(p).is_absolute() else p
        data = DataConfig(*(fix(getattr(self.data, f.name)) for f in dataclasses.fields(DataConfig)))
        model = replace(self.model, weights=fix(self.model.weights))
        return replace(self, data=data, model=model, train=replace(self.train, output_dir=fix(self.train.output_dir)))


# --------------------------------------------------------------------------- TOML mapping

_TRAIN_KEYS = ("batch_size", "base_lr", "group_divisors", "schedule_shape", "optimizer", "momentum",
               "weight_decay", "adam_betas", "image_size")


def _take(section: dict, cls, name: str, exclude=()) -> dict:
    allowed = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    return dict(section)


def config_from_dict(doc: dict[str, Any]) -> RunConfig:
    doc = dict(doc)
    known = {"seed", "data", "model", "train", "augment", "eval", "output"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    try:
        data = DataConfig(**_take(doc.get("data", {}), DataConfig, "data"))
        model_sec = _take(doc.get("model", {}), ModelConfig, "model")
        for k in ("hidden_widths", "dropout_ps"):
            if k in model_sec:
                model_sec[k] = tuple(model_sec[k])
        model = ModelConfig(**model_sec)
        train_sec = dict(doc.get("train", {}))
        phases = train_sec.pop("phases", None)
        unknown = set(train_sec) - set(_TRAIN_KEYS)
        if unknown:
            raise ConfigError(f"unknown key(s) in [train]: {', '.join(sorted(unknown))}")
        if phases is not None:
            train_sec["phases"] = tuple(PhaseLayout(**p) for p in phases)
        aug = AugmentationPolicy(**_take(doc.get("augment", {}), AugmentationPolicy, "augment"))
        output = doc.get("output", {})
        if set(output) - {"dir"}:
            raise ConfigError("[output] only accepts 'dir'")
        train = TrainConfig(**train_sec, seed=int(doc.get("seed", 0)), augmentation=aug,
                            output_dir=output.get("dir", TrainConfig.output_dir))
        ev = EvalConfig(**_take(doc.get("eval", {}), EvalConfig, "eval"))
        model.head_spec()
        train.phase_specs()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    return RunConfig(data, model, train, ev)


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    t = cfg.train
    train = {k: getattr(t, k) for k in _TRAIN_KEYS}
    train["group_divisors"] = list(t.group_divisors)
    train["adam_betas"] = list(t.adam_betas)
    train["phases"] = [
        {"n_cycles": p.n_cycles, "first_cycle_epochs": p.first_cycle_epochs, "cycle_mult": p.cycle_mult,
         "frozen_groups": list(p.frozen_groups)}
        for p in t.phases
    ]
    return {
        "seed": t.seed,
        "data": dataclasses.asdict(cfg.data),
        "model": {**dataclasses.asdict(cfg.model), "hidden_widths": list(cfg.model.hidden_widths),
                  "dropout_ps": list(cfg.model.dropout_ps)},
        "train": train,
        "augment": dataclasses.asdict(t.augmentation),
        "eval": dataclasses.asdict(cfg.eval),
        "output": {"dir": t.output_dir},
    }


def parse_config(text: str) -> RunConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    return config_from_dict(doc)


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def load_config(path: str | Path | None) -> RunConfig:
    """Read a config file; relative paths inside it resolve against its directory."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text).resolve_paths(path.parent)


def split_csvs(cfg: RunConfig) -> dict[str, str]:
    """Configured ground-truth CSV per split, skipping splits left empty."""
    return {s: cfg.data.csv_for(s) for s in SPLITS if cfg.data.csv_for(s)}
