"""Projector-only alignment loop, learning-rate schedule, loss smoothing and checkpoint selection."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .errors import DivergenceError, EmptyDataset, EmptyInput, FreezeViolation, InvalidStep
from .model import PartitionReport, ToyVLM, parameter_partition
from .scenegen import load_image
from .tokenizer import Vocabulary

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    peak_lr: float = 1e-4
    warmup_ratio: float = 0.03
    max_steps: int = 1000
    batch_size: int = 16
    eval_interval: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    bf16: bool = False

    def validate(self) -> None:
        if not 0 < self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must be in (0, 1)")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.eval_interval < 1 or self.max_steps // self.eval_interval < 2:
            raise ValueError("eval_interval must allow at least two evaluations")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def warmup_steps(config: TrainConfig) -> int:
    return math.floor(config.warmup_ratio * config.max_steps)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` followed by cosine decay to zero at ``max_steps``."""
    if not 0 <= step <= config.max_steps:
        raise InvalidStep(f"step {step} outside [0, {config.max_steps}]")
    warm = warmup_steps(config)
    if step < warm:
        return config.peak_lr * step / warm
    span = config.max_steps - warm
    if span == 0:
        return config.peak_lr
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


def smooth(values: Sequence[float], alpha: float = 0.9) -> list[float]:
    """Exponential moving average with ``s_0 = x_0``."""
    if len(values) == 0:
        raise EmptyInput("nothing to smooth")
    if not 0 <= alpha < 1:
        raise ValueError("alpha must be in [0, 1)")
    out = [float(values[0])]
    for x in values[1:]:
        out.append(alpha * out[-1] + (1 - alpha) * float(x))
    return out


@dataclass
class LossCurve:
    kind: str
    points: list[tuple[int, float]] = field(default_factory=list)

    @property
    def steps(self) -> list[int]:
        return [s for s, _ in self.points]

    @property
    def values(self) -> list[float]:
        return [v for _, v in self.points]

    def append(self, step: int, value: float) -> None:
        if self.points and step <= self.points[-1][0]:
            raise ValueError("steps must be strictly increasing")
        if not math.isfinite(value):
            raise ValueError("loss values must be finite")
        self.points.append((step, float(value)))

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "value"])
            w.writerows((s, repr(v)) for s, v in self.points)

    @classmethod
    def read_csv(cls, path: Path, kind: str) -> "LossCurve":
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        return cls(kind, [(int(r["step"]), float(r["value"])) for r in rows])


def select_checkpoint(val_curve: LossCurve | Sequence[tuple[int, float]]) -> int:
    """Eval step with the lowest raw validation loss; ties go to the earlier step."""
    points = val_curve.points if isinstance(val_curve, LossCurve) else list(val_curve)
    if not points:
        raise EmptyInput("validation curve is empty")
    best_step, best = points[0]
    for step, value in points[1:]:
        if value < best:
            best_step, best = step, value
    return best_step


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray
    prompt_ids: list[int]
    target_ids: list[int]  # includes the closing EOS


def encode_sample(image: np.ndarray, prompt: str, answer: str, vocab: Vocabulary) -> Sample:
    return Sample(image, [vocab.bos] + vocab.tokenize(prompt), vocab.tokenize(answer) + [vocab.eos])


def encode_examples(examples, image_root: str | os.PathLike, vocab: Vocabulary) -> list[Sample]:
    """Load images and tokenize conversation examples."""
    root = Path(image_root)
    return [encode_sample(load_image(root / ex.images[0]), ex.prompt, ex.assistant_text, vocab) for ex in examples]


def collate(samples: Sequence[Sample], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-padded ``(ids, target_mask)``; the mask selects target tokens only."""
    seqs = [s.prompt_ids + s.target_ids for s in samples]
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    mask = torch.zeros(len(seqs), width)
    for i, (s, seq) in enumerate(zip(samples, seqs)):
        ids[i, : len(seq)] = torch.tensor(seq)
        mask[i, len(s.prompt_ids) : len(seq)] = 1.0
    return ids, mask


@torch.no_grad()
def encode_features(model: ToyVLM, images: Sequence[np.ndarray], chunk: int = 64) -> torch.Tensor:
    parts = [model.encode_image(np.stack(images[i : i + chunk])) for i in range(0, len(images), chunk)]
    return torch.cat(parts)


@torch.no_grad()
def validation_loss(
    model: ToyVLM, samples: Sequence[Sample], features: torch.Tensor | None = None, chunk: int = 64
) -> float:
    """Mean over examples of the summed target negative log-likelihood."""
    if not samples:
        raise EmptyDataset("validation split is empty")
    if features is None:
        features = encode_features(model, [s.image for s in samples])
    total = 0.0
    for i in range(0, len(samples), chunk):
        ids, mask = collate(samples[i : i + chunk], model.vocab.pad)
        total += float(model.batch_loss(model.project(features[i : i + chunk]), ids, mask).sum())
    return total / len(samples)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class RunArtifacts:
    train_curve: LossCurve
    val_curve: LossCurve
    selected_step: int
    partition: PartitionReport
    config: TrainConfig
    checkpoints: dict[int, object] = field(default_factory=dict)  # step -> path, or projector state


def _verify_freeze(model: ToyVLM, reference: dict[str, str]) -> None:
    current = model.backbone_digests()
    changed = sorted(name for name, digest in reference.items() if current.get(name) != digest)
    if changed:
        raise FreezeViolation(changed)


def train_projector(
    model: ToyVLM,
    train: Sequence[Sample],
    val: Sequence[Sample],
    config: TrainConfig,
    run_dir: str | os.PathLike | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> RunArtifacts:
    """Optimize the projector alone; backbones are frozen and audited by digest."""
    config.validate()
    if not train or not val:
        raise EmptyDataset("train and validation splits must be non-empty")
    model.freeze_backbones()
    reference = model.backbone_digests()
    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        (run / "curves").mkdir(parents=True, exist_ok=True)
        (run / "config.json").write_text(
            json.dumps({"train": asdict(config), "model": model.config_dict()}, indent=1, sort_keys=True)
        )

    train_feats = encode_features(model, [s.image for s in train])
    val_feats = encode_features(model, [s.image for s in val])
    params = list(model.projector.parameters())
    opt = torch.optim.AdamW(
        params, lr=config.peak_lr, betas=(config.beta1, config.beta2), weight_decay=config.weight_decay
    )
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(train))
    cursor = 0
    train_curve, val_curve = LossCurve("train"), LossCurve("val")
    checkpoints: dict[int, object] = {}

    for step in range(config.max_steps):
        if cursor + config.batch_size > len(order):
            order, cursor = rng.permutation(len(train)), 0
        idx = order[cursor : cursor + config.batch_size]
        cursor += config.batch_size
        batch = [train[i] for i in idx]
        ids, mask = collate(batch, model.vocab.pad)
        for g in opt.param_groups:
            g["lr"] = lr_at(step, config)
        with torch.autocast("cpu", dtype=torch.bfloat16, enabled=config.bf16):
            loss = model.batch_loss(model.project(train_feats[idx]), ids, mask).mean()
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(step + 1, value)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        train_curve.append(step + 1, value)
        if on_step is not None:
            on_step(step + 1, value)

        if (step + 1) % config.eval_interval == 0:
            v = validation_loss(model, val, val_feats)
            val_curve.append(step + 1, v)
            log.info("step %d train %.4f val %.4f", step + 1, value, v)
            if run is not None:
                checkpoints[step + 1] = save_checkpoint(
                    model, run / "checkpoints" / f"step-{step + 1}", extra={"step": step + 1, "val_loss": v}
                )
            else:
                checkpoints[step + 1] = {k: t.detach().clone() for k, t in model.projector.state_dict().items()}

    _verify_freeze(model, reference)
    selected = select_checkpoint(val_curve)
    partition = parameter_partition(model)
    if run is not None:
        train_curve.write_csv(run / "curves" / "train.csv")
        val_curve.write_csv(run / "curves" / "val.csv")
        (run / "selected.txt").write_text(f"{selected}\n")
        (run / "partition.json").write_text(json.dumps(partition.as_dict(), indent=1))
    return RunArtifacts(train_curve, val_curve, selected, partition, config, checkpoints)


def restore_projector(model: ToyVLM, checkpoint) -> None:
    """Load projector weights from an in-memory state or a checkpoint directory."""
    if isinstance(checkpoint, dict):
        model.projector.load_state_dict(checkpoint)
        return
    from .checkpoint import load_checkpoint

    saved = load_checkpoint(checkpoint)
    model.projector.load_state_dict(saved.projector.state_dict())


def plot_loss_curves(train: LossCurve, val: LossCurve, path: str | os.PathLike, alpha: float = 0.9) -> None:
    """Raw and exponentially smoothed train/validation curves, side by side, as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    for ax, curve, title in ((axes[0], train, "(a) training loss"), (axes[1], val, "(b) validation loss")):
        ax.plot(curve.steps, curve.values, color="tab:blue", alpha=0.6, label="raw")
        ax.plot(curve.steps, smooth(curve.values, alpha), color="tab:orange", label="smoothed")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
