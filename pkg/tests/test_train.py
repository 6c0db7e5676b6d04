import math

import numpy as np
import pytest
import torch

from thermalign.checkpoint import load_checkpoint, read_meta, save_checkpoint
from thermalign.errors import DivergenceError, EmptyDataset, EmptyInput, FreezeViolation, InvalidStep, SchemaError
from thermalign.evalkit import render_prompt
from thermalign.model import ToyVLM
from thermalign.scenegen import SPECIES, SceneSpec, generate_scene
from thermalign.train import (
    LossCurve,
    TrainConfig,
    collate,
    encode_sample,
    lr_at,
    restore_projector,
    select_checkpoint,
    smooth,
    train_projector,
    validation_loss,
    warmup_steps,
)

# ---------------------------------------------------------------- schedule


@pytest.mark.parametrize(
    "step,expected",
    [(0, 0.0), (15, 5e-5), (30, 1e-4), (515, 5e-5), (1000, 0.0)],
)
def test_lr_schedule_points(step, expected):
    assert abs(lr_at(step, TrainConfig()) - expected) <= 1e-12


def test_lr_schedule_closed_form_everywhere():
    cfg = TrainConfig(max_steps=437, peak_lr=3e-4, warmup_ratio=0.05)
    w = math.floor(0.05 * 437)
    for s in range(438):
        ref = 3e-4 * s / w if s < w else 3e-4 * 0.5 * (1 + math.cos(math.pi * (s - w) / (437 - w)))
        assert abs(lr_at(s, cfg) - ref) <= 1e-15
    assert warmup_steps(TrainConfig()) == 30


@pytest.mark.parametrize("step", [-1, 1001])
def test_lr_out_of_range(step):
    with pytest.raises(InvalidStep):
        lr_at(step, TrainConfig())


@pytest.mark.parametrize(
    "changes",
    [{"warmup_ratio": 0.0}, {"warmup_ratio": 1.0}, {"max_steps": 0}, {"eval_interval": 600}, {"batch_size": 0}],
)
def test_config_validation(changes):
    with pytest.raises(ValueError):
        TrainConfig(**changes).validate()


# ---------------------------------------------------------------- smoothing / selection


def test_smooth_examples():
    assert smooth([4, 2, 2], alpha=0.5) == [4, 3, 2.5]
    assert smooth([1.0, 5.0, 2.0], alpha=0.0) == [1.0, 5.0, 2.0]
    assert smooth([3.0] * 6) == pytest.approx([3.0] * 6)
    with pytest.raises(EmptyInput):
        smooth([])
    with pytest.raises(ValueError):
        smooth([1.0], alpha=1.0)


def test_select_checkpoint_examples():
    assert select_checkpoint([(500, 2.0), (1000, 1.5), (1500, 1.7)]) == 1000
    assert select_checkpoint([(100, 3.0), (200, 2.0), (300, 1.0)]) == 300
    assert select_checkpoint([(500, 1.0), (1000, 1.0), (1500, 2.0)]) == 500
    with pytest.raises(EmptyInput):
        select_checkpoint([])


def test_loss_curve_invariants(tmp_path):
    c = LossCurve("val")
    c.append(1, 2.0)
    with pytest.raises(ValueError):
        c.append(1, 1.0)
    with pytest.raises(ValueError):
        c.append(2, float("nan"))
    c.append(5, 0.1 + 0.2)
    c.write_csv(tmp_path / "v.csv")
    assert LossCurve.read_csv(tmp_path / "v.csv", "val") == c


# ---------------------------------------------------------------- training loop


def _samples(n: int, seed: int, vocab) -> list:
    out = []
    for i in range(n):
        s = generate_scene(SceneSpec(seed=seed + i, species=SPECIES[i % 3], count=1 + i % 12))
        answer = f"{s.species.capitalize()}; {s.count}"
        out.append(encode_sample(s.thermal, render_prompt("closed" if i % 2 else "open"), answer, vocab))
    return out


@pytest.fixture(scope="module")
def data():
    vocab = ToyVLM(seed=0).vocab
    return _samples(24, 100, vocab), _samples(6, 900, vocab)


CFG = TrainConfig(peak_lr=3e-3, max_steps=30, batch_size=4, eval_interval=10, seed=2)


def test_collate_masks_targets_only(data):
    train, _ = data
    ids, mask = collate(train[:3], pad_id=0)
    for i, s in enumerate(train[:3]):
        n_p, n_t = len(s.prompt_ids), len(s.target_ids)
        assert mask[i, :n_p].sum() == 0 and mask[i, n_p : n_p + n_t].sum() == n_t
        assert mask[i, n_p + n_t :].sum() == 0


def test_training_run(data, tmp_path):
    train, val = data
    model = ToyVLM(seed=1)
    before = model.backbone_digests()
    feats_before = model.encode_image(train[0].image)
    art = train_projector(model, train, val, CFG, run_dir=tmp_path)
    assert model.backbone_digests() == before
    assert torch.equal(model.encode_image(train[0].image), feats_before)
    assert len(art.val_curve.points) == 30 // 10
    assert art.train_curve.steps == list(range(1, 31))
    assert art.selected_step in art.val_curve.steps
    assert smooth(art.train_curve.values)[-1] < art.train_curve.values[0]
    for name in ("curves/train.csv", "curves/val.csv", "selected.txt", "partition.json", "config.json"):
        assert (tmp_path / name).exists()
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["step-10", "step-20", "step-30"]
    assert read_meta(tmp_path / "checkpoints" / "step-20")["extra"]["step"] == 20


def test_checkpoint_reload_reproduces_validation_loss(data, tmp_path):
    train, val = data
    model = ToyVLM(seed=1)
    art = train_projector(model, train, val, CFG, run_dir=tmp_path)
    best = art.selected_step
    reloaded = load_checkpoint(tmp_path / "checkpoints" / f"step-{best}")
    recorded = dict(art.val_curve.points)[best]
    assert abs(validation_loss(reloaded, val) - recorded) <= 1e-6 * recorded

    fresh = ToyVLM(seed=1)
    restore_projector(fresh, tmp_path / "checkpoints" / f"step-{best}")
    assert abs(validation_loss(fresh, val) - recorded) <= 1e-6 * recorded


def test_reproducible_and_in_memory_checkpoints(data):
    train, val = data
    a = train_projector(ToyVLM(seed=1), train, val, CFG)
    b = train_projector(ToyVLM(seed=1), train, val, CFG)
    assert a.train_curve == b.train_curve and a.val_curve == b.val_curve
    assert set(a.checkpoints) == {10, 20, 30}
    model = ToyVLM(seed=1)
    restore_projector(model, a.checkpoints[a.selected_step])
    recorded = dict(a.val_curve.points)[a.selected_step]
    assert validation_loss(model, val) == pytest.approx(recorded, rel=1e-6)


def test_freeze_violation_is_detected(data):
    train, val = data
    model = ToyVLM(seed=1)

    def tamper(step, _loss):
        if step == 5:
            with torch.no_grad():
                model.lm.head.bias[0] += 1.0

    with pytest.raises(FreezeViolation) as info:
        train_projector(model, train, val, CFG, on_step=tamper)
    assert "lm.head.bias" in info.value.tensors


def test_divergence_reports_step(data):
    train, val = data
    model = ToyVLM(seed=1)

    def poison(step, _loss):
        if step == 3:
            with torch.no_grad():
                model.projector.fc2.bias.fill_(float("nan"))

    with pytest.raises(DivergenceError) as info:
        train_projector(model, train, val, CFG, on_step=poison)
    assert info.value.step == 4


def test_empty_splits(data):
    train, _ = data
    with pytest.raises(EmptyDataset):
        train_projector(ToyVLM(seed=1), train, [], CFG)


def test_checkpoint_digest_mismatch(tmp_path):
    model = ToyVLM(seed=4)
    path = save_checkpoint(model, tmp_path / "ck")
    with np.load(path / "weights.npz") as arrays:
        state = {k: arrays[k].copy() for k in arrays.files}
    state["projector.fc1.bias"][0] += 1.0
    np.savez(path / "weights.npz", **state)
    with pytest.raises(SchemaError):
        load_checkpoint(path)
