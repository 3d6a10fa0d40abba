"""Two-phase training: head-only warm-up, then discriminative fine-tuning of the whole model."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Callable, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import IMAGE_SIZE, AugmentationPolicy, Manifest, make_batches
from .errors import CheckpointError, NonFiniteLossError
from .model import BackboneSpec, HeadSpec, ModelAssembly, build_model, set_frozen, split_layer_groups
from .schedule import N_GROUPS, RECIPE_BASE_LR, RECIPE_DIVISORS, PhaseSpec, SchedulePlan, lr_at, steps_per_epoch
from .seeding import stream, torch_seed

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class PhaseLayout:
    """Cycle structure of one phase; rates come from the enclosing TrainConfig."""

    n_cycles: int
    first_cycle_epochs: int = 1
    cycle_mult: int = 1
    frozen_groups: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "frozen_groups", tuple(sorted(int(g) for g in self.frozen_groups)))


RECIPE_LAYOUT = (
    PhaseLayout(n_cycles=4, first_cycle_epochs=1, cycle_mult=1, frozen_groups=(0, 1)),
    PhaseLayout(n_cycles=4, first_cycle_epochs=1, cycle_mult=2, frozen_groups=()),
)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    base_lr: float = RECIPE_BASE_LR
    group_divisors: tuple[float, ...] = RECIPE_DIVISORS
    phases: tuple[PhaseLayout, ...] = RECIPE_LAYOUT
    schedule_shape: str = "cosine"
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    augmentation: AugmentationPolicy = AugmentationPolicy()
    image_size: int = IMAGE_SIZE
    output_dir: str = "runs/default"

    def __post_init__(self):
        object.__setattr__(self, "group_divisors", tuple(float(d) for d in self.group_divisors))
        object.__setattr__(self, "phases", tuple(self.phases))
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")

    def phase_specs(self) -> tuple[PhaseSpec, ...]:
        return tuple(
            PhaseSpec(p.n_cycles, p.first_cycle_epochs, p.cycle_mult, self.base_lr, self.group_divisors,
                      frozenset(p.frozen_groups))
            for p in self.phases
        )

    def plan(self, n_train: int) -> SchedulePlan:
        return SchedulePlan(self.phase_specs(), steps_per_epoch(n_train, self.batch_size), self.schedule_shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["group_divisors"] = list(self.group_divisors)
        d["adam_betas"] = list(self.adam_betas)
        d["phases"] = [{**asdict(p), "frozen_groups": list(p.frozen_groups)} for p in self.phases]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "phases" in d:
            d["phases"] = tuple(PhaseLayout(**p) for p in d["phases"])
        if "augmentation" in d:
            d["augmentation"] = AugmentationPolicy(**d["augmentation"])
        return cls(**d)


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


class LossRecord(NamedTuple):
    step: int
    epoch: int
    phase: int
    loss: float


@dataclass
class TrainState:
    model: ModelAssembly
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    plan: SchedulePlan
    global_step: int = 0
    loss_history: list[LossRecord] = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)
    phase_seconds: dict[int, float] = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return self.global_step // self.plan.steps_per_epoch

    @property
    def phase(self) -> int:
        if self.global_step >= self.plan.total_steps:
            return len(self.plan.phases) - 1
        return self.plan.locate(self.global_step)[0]

    @property
    def finished(self) -> bool:
        return self.global_step >= self.plan.total_steps

    def final_step_loss(self) -> float | None:
        return self.loss_history[-1].loss if self.loss_history else None

    def final_epoch_mean_loss(self) -> float | None:
        if not self.loss_history:
            return None
        last = self.loss_history[-1].epoch
        return float(np.mean([r.loss for r in self.loss_history if r.epoch == last]))


# --------------------------------------------------------------------------- pieces


def loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean categorical cross-entropy."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError(f"label index outside 0..{logits.shape[-1] - 1}")
    return F.cross_entropy(logits, labels)


def make_optimizer(model: ModelAssembly, config: TrainConfig) -> torch.optim.Optimizer:
    groups = [{"params": params, "lr": 0.0} for params in split_layer_groups(model)]
    if config.optimizer == "adam":
        return torch.optim.Adam(groups, betas=config.adam_betas, weight_decay=config.weight_decay)
    return torch.optim.SGD(groups, momentum=config.momentum, weight_decay=config.weight_decay)


def apply_lrs(optimizer: torch.optim.Optimizer, plan: SchedulePlan, step: int) -> list[float]:
    lrs = [lr_at(plan, step, g) for g in range(N_GROUPS)]
    for group, lr in zip(optimizer.param_groups, lrs):
        group["lr"] = lr
    return lrs


def new_state(config: TrainConfig, n_train: int, backbone: BackboneSpec, head: HeadSpec) -> TrainState:
    model = build_model(backbone, head, seed=config.seed)
    return TrainState(model, make_optimizer(model, config), config, config.plan(n_train),
                      rng_state={"seed": config.seed})


def _head_batchnorms(model: ModelAssembly) -> list[nn.Module]:
    return [m for m in model.head.modules() if isinstance(m, nn.BatchNorm1d)]


def train_phase(state: TrainState, phase: int, data: Manifest, until_step: int | None = None,
                on_cycle_end: Callable[[TrainState, int], None] | None = None) -> TrainState:
    """Run (the rest of) one phase, resuming from ``state.global_step`` if it is inside it.

    Every random draw is keyed by (seed, epoch) or (seed, step), so a resumed
    run reproduces an uninterrupted one exactly.
    """
    plan, cfg, model, opt = state.plan, state.config, state.model, state.optimizer
    start = max(state.global_step, plan.phase_start_step(phase))
    end = plan.phase_end_step(phase)
    if until_step is not None:
        end = min(end, until_step)
    if start >= end:
        return state
    spec = plan.phases[phase]
    set_frozen(model, spec.frozen_groups, True)
    set_frozen(model, set(range(N_GROUPS)) - spec.frozen_groups, False)
    model.train()
    cycle_ends = {s: c for c, s in enumerate(plan.cycle_end_steps())}
    S = plan.steps_per_epoch
    batches, batches_epoch = None, None
    t0 = time.perf_counter()
    for step in range(start, end):
        epoch = step // S
        if epoch != batches_epoch:
            batches = make_batches(data, cfg.batch_size, stream(cfg.seed, "shuffle", epoch), True,
                                   cfg.augmentation, side=cfg.image_size)
            batches_epoch = epoch
        batch = batches[step % S]
        torch.manual_seed(torch_seed(cfg.seed, "dropout", step))
        lrs = apply_lrs(opt, plan, step)
        x = torch.from_numpy(batch.images.data)
        single = x.shape[0] == 1
        if single:  # BatchNorm1d cannot use batch statistics of one sample
            for bn in _head_batchnorms(model):
                bn.eval()
        opt.zero_grad(set_to_none=True)
        value = loss(model(x), batch.labels)
        if not torch.isfinite(value):
            raise NonFiniteLossError(step, lrs, batch.image_ids, value.item())
        value.backward()
        opt.step()
        if single:
            model.train()
        state.loss_history.append(LossRecord(step, epoch, phase, float(value.item())))
        state.global_step = step + 1
        if on_cycle_end is not None and state.global_step in cycle_ends:
            on_cycle_end(state, cycle_ends[state.global_step])
    state.phase_seconds[phase] = state.phase_seconds.get(phase, 0.0) + time.perf_counter() - t0
    return state


# --------------------------------------------------------------------------- checkpoints


def checkpoint_save(state: TrainState, path: str | Path) -> None:
    model = state.model
    meta = {
        "train": state.config.to_dict(),
        "backbone": asdict(model.backbone_spec),
        "head": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(model.head_spec).items()},
        "steps_per_epoch": state.plan.steps_per_epoch,
    }
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": meta,
        "config_hash": config_hash(meta),
        "model": model.state_dict(),
        "frozen": list(model.frozen),
        "optimizer": state.optimizer.state_dict(),
        "global_step": state.global_step,
        "loss_history": [list(r) for r in state.loss_history],
        "rng_state": {**state.rng_state, "torch": torch.get_rng_state()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: corrupt or unreadable checkpoint "
                              f"(expected format version {CHECKPOINT_FORMAT_VERSION}): {exc}") from None
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = payload["format_version"]
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads "
                              f"version {CHECKPOINT_FORMAT_VERSION}")
    if payload.get("config_hash") != config_hash(payload["config"]):
        raise CheckpointError(f"{path}: config hash mismatch (format version {version}); file is corrupt")
    return payload


def model_from_checkpoint(payload: dict) -> ModelAssembly:
    meta = payload["config"]
    model = build_model(BackboneSpec(**meta["backbone"]), HeadSpec(**meta["head"]), load_pretrained=False)
    model.load_state_dict(payload["model"])
    set_frozen(model, [g for g, f in enumerate(payload["frozen"]) if f], True)
    return model


def checkpoint_load(path: str | Path) -> TrainState:
    payload = read_checkpoint(path)
    meta = payload["config"]
    config = TrainConfig.from_dict(meta["train"])
    model = model_from_checkpoint(payload)
    optimizer = make_optimizer(model, config)
    try:
        optimizer.load_state_dict(payload["optimizer"])
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: optimizer state does not match model: {exc}") from None
    plan = SchedulePlan(config.phase_specs(), meta["steps_per_epoch"], config.schedule_shape)
    rng_state = dict(payload["rng_state"])
    if "torch" in rng_state:
        torch.set_rng_state(rng_state.pop("torch"))
    history = [LossRecord(int(s), int(e), int(p), float(l)) for s, e, p, l in payload["loss_history"]]
    return TrainState(model, optimizer, config, plan, int(payload["global_step"]), history, rng_state)


# --------------------------------------------------------------------------- recipe


LOSS_COLUMNS = ("step", "epoch", "phase", "loss")


def write_loss_csv(history, fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(LOSS_COLUMNS)
    for r in history:
        writer.writerow([r.step, r.epoch, r.phase, repr(r.loss)])


def read_loss_csv(fh: IO[str]) -> list[LossRecord]:
    reader = csv.DictReader(fh)
    if reader.fieldnames is None or tuple(reader.fieldnames) != LOSS_COLUMNS:
        raise ValueError(f"loss CSV header must be {','.join(LOSS_COLUMNS)}, got {reader.fieldnames}")
    return [LossRecord(int(r["step"]), int(r["epoch"]), int(r["phase"]), float(r["loss"])) for r in reader]


def run_recipe(config: TrainConfig, train: Manifest, backbone: BackboneSpec = BackboneSpec(),
               head: HeadSpec = HeadSpec(), resume: str | Path | None = None,
               until_step: int | None = None) -> tuple[ModelAssembly, TrainState]:
    """All phases in order, checkpointing at every cycle boundary.

    Writes ``checkpoints/cycle_XX.pt`` and ``checkpoints/last.pt`` plus
    ``loss.csv`` under ``config.output_dir``.
    """
    if len(train) == 0:
        raise ValueError("training manifest is empty")
    out = Path(config.output_dir)
    ckpt_dir = out / "checkpoints"
    if resume is not None:
        state = checkpoint_load(resume)
        expected = steps_per_epoch(len(train), state.config.batch_size)
        if state.plan.steps_per_epoch != expected:
            raise CheckpointError(f"{resume}: checkpoint has {state.plan.steps_per_epoch} steps/epoch, "
                                  f"training manifest gives {expected}")
        config = state.config
    else:
        state = new_state(config, len(train), backbone, head)

    def on_cycle_end(st: TrainState, cycle: int) -> None:
        checkpoint_save(st, ckpt_dir / f"cycle_{cycle:02d}.pt")
        checkpoint_save(st, ckpt_dir / "last.pt")
        log.info("cycle %d done at step %d, loss %.4f", cycle, st.global_step, st.loss_history[-1].loss)

    for phase in range(len(state.plan.phases)):
        train_phase(state, phase, train, until_step=until_step, on_cycle_end=on_cycle_end)
    if until_step is not None and not state.finished:
        checkpoint_save(state, ckpt_dir / "last.pt")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss.csv", "w", encoding="utf-8", newline="") as fh:
        write_loss_csv(state.loss_history, fh)
    state.model.eval()
    return state.model, state


def training_accuracy(model: ModelAssembly, manifest: Manifest, side: int = IMAGE_SIZE) -> float:
    from .inference import evaluate

    report = evaluate(model, manifest, use_tta=False, side=side)
    return float(np.trace(report.confusion) / report.n_records)



def dataset_loss(model: ModelAssembly, manifest: Manifest, batch_size: int = 32, side: int = IMAGE_SIZE) -> float:
    """Mean cross-entropy over a manifest, model in eval mode, no augmentation."""
    model.eval()
    total = 0.0
    batches = make_batches(manifest, batch_size, np.random.default_rng(0), False, side=side, shuffle=False)
    with torch.no_grad():
        for batch in batches:
            total += loss(model(torch.from_numpy(batch.images.data)), batch.labels).item() * len(batch.labels)
    return total / len(manifest)
