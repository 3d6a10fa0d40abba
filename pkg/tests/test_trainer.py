import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from dermclf.dataset import Manifest
from dermclf.errors import CheckpointError, NonFiniteLossError
from dermclf.model import BackboneSpec, HeadSpec
from dermclf.schedule import PhaseSpec, SchedulePlan, lr_at
from dermclf.trainer import (
    RECIPE_LAYOUT,
    PhaseLayout,
    TrainConfig,
    apply_lrs,
    checkpoint_load,
    checkpoint_save,
    loss,
    new_state,
    read_loss_csv,
    run_recipe,
    train_phase,
)

TOY = BackboneSpec("toy", 8)
TOY_HEAD = HeadSpec((16, 16))


def toy_train_config(tmp_path, **kw):
    base = dict(batch_size=4, phases=(PhaseLayout(1, 1, 1, (0, 1)), PhaseLayout(1, 1, 1, ())),
                output_dir=str(tmp_path / "run"))
    base.update(kw)
    return TrainConfig(**base)


def run_steps(cfg, manifest, n_steps=None):
    state = new_state(cfg, len(manifest), TOY, TOY_HEAD)
    for phase in range(len(state.plan.phases)):
        train_phase(state, phase, manifest, until_step=n_steps)
    return state


def first_n(manifest, n):
    return Manifest(manifest.split, manifest.records[:n])


# --------------------------------------------------------------------------- loss


def test_loss_uniform_is_log7():
    assert loss(torch.zeros(3, 7), [0, 4, 6]).item() == pytest.approx(math.log(7), rel=1e-6)
    assert math.log(7) == pytest.approx(1.9459, abs=1e-4)


def test_loss_saturated():
    logits = torch.zeros(1, 7, dtype=torch.float64)
    logits[0, 3] = 50
    assert loss(logits, [3]).item() < 1e-20


def test_loss_hand_example():
    logits = torch.tensor([[2.0, 0, 0, 0, 0, 0, 0]], dtype=torch.float64)
    e2 = math.exp(2)
    assert loss(logits, [0]).item() == pytest.approx(-math.log(e2 / (e2 + 6)), rel=1e-12)
    assert loss(logits, [0]).item() == pytest.approx(0.5944, abs=1e-4)


def test_loss_invalid_label():
    with pytest.raises(ValueError):
        loss(torch.zeros(1, 7), [7])


# --------------------------------------------------------------------------- loop


def test_step_count_ten_records_batch_four(tmp_path, toy_train):
    cfg = toy_train_config(tmp_path, phases=(PhaseLayout(2, 1, 1, ()),))
    state = run_steps(cfg, first_n(toy_train, 10))
    assert [r.step for r in state.loss_history] == list(range(6))
    assert [r.epoch for r in state.loss_history] == [0, 0, 0, 1, 1, 1]
    assert all(math.isfinite(r.loss) and r.loss >= 0 for r in state.loss_history)


def test_phase1_leaves_frozen_groups_untouched(tmp_path, toy_train):
    cfg = toy_train_config(tmp_path, phases=(PhaseLayout(2, 1, 1, (0, 1)),))
    state = new_state(cfg, len(toy_train), TOY, TOY_HEAD)
    before = [state.model.group_checksum(g) for g in range(3)]
    train_phase(state, 0, toy_train)
    after = [state.model.group_checksum(g) for g in range(3)]
    assert before[:2] == after[:2]
    assert before[2] != after[2]


def test_same_seed_same_history(tmp_path, toy_train):
    cfg = toy_train_config(tmp_path)
    a = run_steps(cfg, toy_train).loss_history
    b = run_steps(cfg, toy_train).loss_history
    assert a == b
    c = run_steps(replace(cfg, seed=1), toy_train).loss_history
    assert a != c


def test_resume_matches_uninterrupted(tmp_path, toy_train):
    cfg = toy_train_config(tmp_path)
    straight = run_steps(cfg, toy_train)
    assert straight.global_step == 8
    part = run_steps(cfg, toy_train, n_steps=3)
    ckpt = tmp_path / "mid.pt"
    checkpoint_save(part, ckpt)
    resumed = checkpoint_load(ckpt)
    assert resumed.global_step == 3
    for phase in range(2):
        train_phase(resumed, phase, toy_train)
    assert resumed.loss_history == straight.loss_history
    for a, b in zip(resumed.model.state_dict().values(), straight.model.state_dict().values()):
        assert torch.equal(a, b)


def test_checkpoint_round_trip(tmp_path, toy_train):
    state = run_steps(toy_train_config(tmp_path), toy_train, n_steps=2)
    path = tmp_path / "c.pt"
    checkpoint_save(state, path)
    loaded = checkpoint_load(path)
    assert [loaded.model.group_checksum(g) for g in range(3)] == [state.model.group_checksum(g) for g in range(3)]
    assert loaded.global_step == 2
    assert loaded.config == state.config
    assert loaded.model.frozen == state.model.frozen
    assert str(loaded.optimizer.state_dict()["state"]) == str(state.optimizer.state_dict()["state"])


def test_checkpoint_errors(tmp_path, toy_train):
    state = run_steps(toy_train_config(tmp_path), toy_train, n_steps=1)
    path = tmp_path / "c.pt"
    checkpoint_save(state, path)
    truncated = tmp_path / "t.pt"
    truncated.write_bytes(path.read_bytes()[:200])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_load(truncated)
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "absent.pt")
    payload = torch.load(path, weights_only=True)
    payload["format_version"] = 99
    torch.save(payload, tmp_path / "v99.pt")
    with pytest.raises(CheckpointError, match="99"):
        checkpoint_load(tmp_path / "v99.pt")


def test_non_finite_loss_aborts(tmp_path, toy_train):
    cfg = toy_train_config(tmp_path)
    state = new_state(cfg, len(toy_train), TOY, TOY_HEAD)
    with torch.no_grad():
        state.model.head.out.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as exc:
        train_phase(state, 0, toy_train)
    assert exc.value.step == 0
    assert len(exc.value.image_ids) == 4
    assert exc.value.lrs[2] == pytest.approx(1e-2)


def test_single_sample_final_batch(tmp_path, toy_train):
    cfg = toy_train_config(tmp_path, batch_size=13, phases=(PhaseLayout(1, 1, 1, ()),))
    state = run_steps(cfg, toy_train)
    assert len(state.loss_history) == 2


def test_adam_option(tmp_path, toy_train):
    state = run_steps(toy_train_config(tmp_path, optimizer="adam"), toy_train, n_steps=2)
    assert isinstance(state.optimizer, torch.optim.Adam)
    assert len(state.loss_history) == 2


def test_effective_step_size_probe():
    # SGD without momentum on one float64 scalar per group with a fixed gradient
    plan = SchedulePlan((PhaseSpec(2, 1, 2, frozen_groups={0}), PhaseSpec(1, 3)), steps_per_epoch=5)
    params = [torch.zeros(1, dtype=torch.float64, requires_grad=True) for _ in range(3)]
    opt = torch.optim.SGD([{"params": [p], "lr": 0.0} for p in params], momentum=0.0)
    g = 0.37
    for k in range(plan.total_steps):
        before = [p.item() for p in params]
        apply_lrs(opt, plan, k)
        for p in params:
            p.grad = torch.full_like(p, g)
        opt.step()
        for grp, p in enumerate(params):
            assert p.item() - before[grp] == pytest.approx(-lr_at(plan, k, grp) * g, abs=1e-12)


# --------------------------------------------------------------------------- recipe


def test_recipe_toy_two_boundary_checkpoints(tmp_path, toy_train):
    cfg = toy_train_config(tmp_path)
    model, state = run_recipe(cfg, toy_train, TOY, TOY_HEAD)
    ckpts = sorted(p.name for p in (tmp_path / "run" / "checkpoints").glob("cycle_*.pt"))
    assert ckpts == ["cycle_00.pt", "cycle_01.pt"]
    assert (tmp_path / "run" / "checkpoints" / "last.pt").exists()
    with open(tmp_path / "run" / "loss.csv") as fh:
        assert read_loss_csv(fh) == state.loss_history
    assert not model.training


def test_recipe_full_layout_eight_boundaries(tmp_path, toy_train):
    # recipe phase layout on a 4-record manifest: 1 step per epoch, 19 steps
    cfg = toy_train_config(tmp_path, phases=RECIPE_LAYOUT)
    _, state = run_recipe(cfg, first_n(toy_train, 4), TOY, TOY_HEAD)
    assert state.plan.total_epochs == 19
    assert len(state.loss_history) == 19
    assert len(list((tmp_path / "run" / "checkpoints").glob("cycle_*.pt"))) == 8


def test_recipe_resume_from_checkpoint(tmp_path, toy_train):
    cfg = toy_train_config(tmp_path)
    _, full = run_recipe(cfg, toy_train, TOY, TOY_HEAD)
    cfg2 = replace(cfg, output_dir=str(tmp_path / "run2"))
    run_recipe(cfg2, toy_train, TOY, TOY_HEAD, until_step=5)
    _, resumed = run_recipe(cfg2, toy_train, TOY, TOY_HEAD, resume=tmp_path / "run2" / "checkpoints" / "last.pt")
    assert resumed.loss_history == full.loss_history


def test_final_loss_reporting(tmp_path, toy_train):
    state = run_steps(toy_train_config(tmp_path), toy_train)
    last_epoch = [r.loss for r in state.loss_history if r.epoch == state.loss_history[-1].epoch]
    assert state.final_step_loss() == state.loss_history[-1].loss
    assert state.final_epoch_mean_loss() == pytest.approx(np.mean(last_epoch))
