"""Per-step, per-layer-group learning rates for the two-phase training program.

Everything here is plain arithmetic over integers and floats; no model or
optimizer is involved, so the whole program can be inspected (and tested)
without training anything.
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, Iterable, NamedTuple, Sequence

N_GROUPS = 3
SHAPES = ("cosine", "triangular")


@dataclass(frozen=True)
class PhaseSpec:
    n_cycles: int
    first_cycle_epochs: int = 1
    cycle_mult: int = 1
    base_lr: float = 1e-2
    group_divisors: tuple[float, float, float] = (9.0, 3.0, 1.0)
    frozen_groups: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.n_cycles < 1 or self.first_cycle_epochs < 1 or self.cycle_mult < 1:
            raise ValueError(f"invalid phase: {self}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        divisors = tuple(float(d) for d in self.group_divisors)
        if len(divisors) != N_GROUPS or any(d <= 0 for d in divisors):
            raise ValueError("group_divisors must be 3 positive numbers")
        frozen = frozenset(int(g) for g in self.frozen_groups)
        if not frozen <= set(range(N_GROUPS)):
            raise ValueError(f"frozen_groups must be a subset of {{0, 1, 2}}, got {sorted(frozen)}")
        object.__setattr__(self, "group_divisors", divisors)
        object.__setattr__(self, "frozen_groups", frozen)

    def group_max_lr(self, group: int) -> float:
        return self.base_lr / self.group_divisors[group]


def cycle_boundaries(phase: PhaseSpec) -> list[int]:
    """Cycle lengths in epochs: ``first_cycle_epochs * cycle_mult**k``."""
    return [phase.first_cycle_epochs * phase.cycle_mult**k for k in range(phase.n_cycles)]


class _Cycle(NamedTuple):
    phase: int
    cycle: int  # global cycle index across phases
    start_step: int
    n_steps: int
    start_epoch: int


@dataclass(frozen=True)
class SchedulePlan:
    phases: tuple[PhaseSpec, ...]
    steps_per_epoch: int
    shape: str = "cosine"

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if not self.phases:
            raise ValueError("a plan needs at least one phase")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown schedule shape {self.shape!r}; expected one of {SHAPES}")

    @cached_property
    def _cycles(self) -> tuple[_Cycle, ...]:
        cycles = []
        epoch = 0
        for p, phase in enumerate(self.phases):
            for length in cycle_boundaries(phase):
                cycles.append(_Cycle(p, len(cycles), epoch * self.steps_per_epoch, length * self.steps_per_epoch, epoch))
                epoch += length
        return tuple(cycles)

    @cached_property
    def _starts(self) -> list[int]:
        return [c.start_step for c in self._cycles]

    @property
    def total_epochs(self) -> int:
        return sum(sum(cycle_boundaries(p)) for p in self.phases)

    @property
    def total_cycles(self) -> int:
        return sum(p.n_cycles for p in self.phases)

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.total_epochs

    def phase_epochs(self, phase: int) -> int:
        return sum(cycle_boundaries(self.phases[phase]))

    def phase_start_step(self, phase: int) -> int:
        return sum(self.phase_epochs(p) for p in range(phase)) * self.steps_per_epoch

    def phase_end_step(self, phase: int) -> int:
        return self.phase_start_step(phase) + self.phase_epochs(phase) * self.steps_per_epoch

    def restart_epochs(self) -> list[int]:
        return [c.start_epoch for c in self._cycles]

    def locate(self, global_step: int) -> tuple[int, int, int, int]:
        """Return ``(phase, cycle, steps_into_cycle, cycle_steps)`` for a step."""
        if not 0 <= global_step < self.total_steps:
            raise IndexError(f"step {global_step} outside plan of {self.total_steps} steps")
        c = self._cycles[bisect.bisect_right(self._starts, global_step) - 1]
        return c.phase, c.cycle, global_step - c.start_step, c.n_steps

    def cycle_end_steps(self) -> list[int]:
        """Step index one past the end of each cycle."""
        return [c.start_step + c.n_steps for c in self._cycles]


def _anneal(shape: str, t: int, T: int) -> float:
    if shape == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * t / T))
    # triangular: 0 -> 1 at mid-cycle -> 0
    return 1.0 - abs(2.0 * t / T - 1.0)


def lr_at(plan: SchedulePlan, global_step: int, group: int) -> float:
    """Learning rate for ``group`` at the start of optimizer step ``global_step``.

    Frozen groups report 0. Otherwise the group's maximum rate
    ``base_lr / divisor`` is annealed within the current cycle and restarts
    at every cycle boundary.
    """
    if not 0 <= group < N_GROUPS:
        raise IndexError(f"group {group} not in 0..{N_GROUPS - 1}")
    p, _, t, T = plan.locate(global_step)
    phase = plan.phases[p]
    if group in phase.frozen_groups:
        return 0.0
    return phase.group_max_lr(group) * _anneal(plan.shape, t, T)


def restart_steps(plan: SchedulePlan) -> list[int]:
    return list(plan._starts)


class ScheduleRow(NamedTuple):
    step: int
    epoch: int
    phase: int
    cycle: int
    lr_g0: float
    lr_g1: float
    lr_g2: float


SCHEDULE_COLUMNS = ScheduleRow._fields


def emit_schedule_table(plan: SchedulePlan) -> list[ScheduleRow]:
    rows = []
    for step in range(plan.total_steps):
        phase, cycle, _, _ = plan.locate(step)
        lrs = [lr_at(plan, step, g) for g in range(N_GROUPS)]
        rows.append(ScheduleRow(step, step // plan.steps_per_epoch, phase, cycle, *lrs))
    return rows


def write_schedule_csv(rows: Iterable[ScheduleRow], fh: IO[str]) -> None:
    # repr() round-trips floats exactly
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(SCHEDULE_COLUMNS)
    for r in rows:
        writer.writerow([r.step, r.epoch, r.phase, r.cycle, repr(r.lr_g0), repr(r.lr_g1), repr(r.lr_g2)])


def read_schedule_csv(fh: IO[str]) -> list[ScheduleRow]:
    reader = csv.DictReader(fh)
    if reader.fieldnames is None or tuple(reader.fieldnames) != SCHEDULE_COLUMNS:
        raise ValueError(f"schedule CSV header must be {','.join(SCHEDULE_COLUMNS)}, got {reader.fieldnames}")
    rows = []
    for rec in reader:
        rows.append(
            ScheduleRow(
                int(rec["step"]), int(rec["epoch"]), int(rec["phase"]), int(rec["cycle"]),
                float(rec["lr_g0"]), float(rec["lr_g1"]), float(rec["lr_g2"]),
            )
        )
    return rows


RECIPE_BASE_LR = 1e-2
RECIPE_DIVISORS = (9.0, 3.0, 1.0)


def recipe_phases(base_lr: float = RECIPE_BASE_LR, divisors: Sequence[float] = RECIPE_DIVISORS) -> tuple[PhaseSpec, PhaseSpec]:
    """Head-only warm-up (4 one-epoch cycles) then full fine-tuning (cycles of 1, 2, 4, 8 epochs)."""
    return (
        PhaseSpec(n_cycles=4, first_cycle_epochs=1, cycle_mult=1, base_lr=base_lr,
                  group_divisors=tuple(divisors), frozen_groups=frozenset({0, 1})),
        PhaseSpec(n_cycles=4, first_cycle_epochs=1, cycle_mult=2, base_lr=base_lr,
                  group_divisors=tuple(divisors), frozen_groups=frozenset()),
    )


def recipe_plan(steps_per_epoch: int, base_lr: float = RECIPE_BASE_LR) -> SchedulePlan:
    return SchedulePlan(recipe_phases(base_lr), steps_per_epoch)


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    """Partial final batches are kept, so this is a ceiling division."""
    if n_train < 1 or batch_size < 1:
        raise ValueError("n_train and batch_size must be >= 1")
    return -(-n_train // batch_size)


def describe_plan(plan: SchedulePlan) -> str:
    lines = []
    for p, phase in enumerate(plan.phases):
        frozen = ",".join(str(g) for g in sorted(phase.frozen_groups)) or "none"
        lengths = cycle_boundaries(phase)
        max_lrs = ", ".join(f"{phase.group_max_lr(g):.6g}" for g in range(N_GROUPS))
        lines.append(
            f"phase {p + 1}: {phase.n_cycles} cycles, cycle epochs {lengths} (sum {sum(lengths)}), "
            f"frozen groups: {frozen}, max lr per group: [{max_lrs}]"
        )
    lines.append(f"total epochs: {plan.total_epochs}")
    lines.append(f"total cycles: {plan.total_cycles}")
    lines.append("restart epochs: " + ", ".join(str(e) for e in plan.restart_epochs()))
    lines.append(f"steps per epoch: {plan.steps_per_epoch}")
    lines.append(f"total steps: {plan.total_steps}")
    lines.append(f"schedule shape: {plan.shape}")
    return "\n".join(lines)
