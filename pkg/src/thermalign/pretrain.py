"""Stand-in for large-scale RGB pretraining of the vision and language backbones.

Encoder, language model and a throwaway projector are trained jointly on RGB
renders with the "Species; Count" answer format. Afterwards the backbones are
frozen and the projector is re-initialized for alignment.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import PretrainDivergence
from .evalkit import parse_species_count, render_prompt
from .model import ToyVLM
from .scenegen import CorpusConfig, corpus_plan, generate_scene
from .train import Sample, collate, encode_sample

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    steps: int = 5000
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    seed: int = 0


@dataclass
class PretrainResult:
    losses: list[float] = field(default_factory=list)  # per-target-token loss for each step
    heldout_accuracy: float | None = None
    heldout_within1: float | None = None


def source_corpus(n_per_species: int, seed: int, size: int = 64, glyph_scale: int = 5) -> list[tuple]:
    """RGB renders as ``(rgb, species, count)``, from seeds disjoint from the thermal corpus."""
    cfg = CorpusConfig(n_per_species=n_per_species, seed=seed, size=size, glyph_scale=glyph_scale)
    out = []
    for spec in corpus_plan(cfg):
        scene = generate_scene(spec)
        out.append((scene.rgb, scene.species, scene.count))
    return out


def source_samples(scenes: Sequence[tuple], model: ToyVLM, seed: int) -> list[Sample]:
    """Pair each render with a closed- or open-set prompt, alternating at random."""
    rng = np.random.default_rng(seed)
    modes = rng.integers(0, 2, size=len(scenes))
    return [
        encode_sample(rgb, render_prompt("closed" if m else "open"), f"{species.capitalize()}; {count}", model.vocab)
        for (rgb, species, count), m in zip(scenes, modes)
    ]


def _dihedral(image: np.ndarray, code: int) -> np.ndarray:
    if code >= 4:
        image = image[:, ::-1]
    return np.rot90(image, code % 4)


def _lr(step: int, cfg: PretrainConfig) -> float:
    if step < cfg.warmup_steps:
        return cfg.peak_lr * (step + 1) / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
    return cfg.peak_lr * 0.5 * (1 + math.cos(math.pi * frac))


def pretrain_backbones(
    model: ToyVLM,
    samples: Sequence[Sample],
    config: PretrainConfig,
    heldout: Sequence[tuple] = (),
    projector_seed: int | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> PretrainResult:
    """Train the whole model on RGB samples, then freeze backbones and reset the projector."""
    for p in model.parameters():
        p.requires_grad_(True)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=config.peak_lr, weight_decay=0.0)
    rng = np.random.default_rng(config.seed)
    result = PretrainResult()
    for step in range(config.steps):
        idx = rng.integers(0, len(samples), size=config.batch_size)
        codes = rng.integers(0, 8, size=config.batch_size)
        batch = [samples[i] for i in idx]
        images = np.stack([_dihedral(s.image, c) for s, c in zip(batch, codes)])
        ids, mask = collate(batch, model.vocab.pad)
        for g in opt.param_groups:
            g["lr"] = _lr(step, config)
        loss = model.batch_loss(model.project(model.encode_image(images)), ids, mask).mean()
        per_token = loss.item() * len(batch) / float(mask.sum())
        if not math.isfinite(per_token):
            raise PretrainDivergence(f"non-finite source loss at step {step + 1}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        result.losses.append(per_token)
        if on_step is not None:
            on_step(step + 1, per_token)
        if (step + 1) % 500 == 0:
            log.info("pretrain step %d loss/token %.4f", step + 1, per_token)

    window = max(1, len(result.losses) // 10)
    if np.mean(result.losses[-window:]) >= np.mean(result.losses[:window]):
        raise PretrainDivergence("source loss did not decrease over the pretraining budget")

    model.eval()
    if heldout:
        result.heldout_accuracy, result.heldout_within1 = source_accuracy(model, heldout)
    model.freeze_backbones()
    model.reset_projector(config.seed + 7919 if projector_seed is None else projector_seed)
    return result


@torch.no_grad()
def source_accuracy(model: ToyVLM, scenes: Sequence[tuple], mode: str = "closed") -> tuple[float, float]:
    """Species accuracy and count within-1 accuracy of greedy answers on RGB scenes."""
    vocab = model.vocab
    prompt = [vocab.bos] + vocab.tokenize(render_prompt(mode))
    hits = near = 0
    for i in range(0, len(scenes), 64):
        chunk = scenes[i : i + 64]
        z = model.project(model.encode_image(np.stack([s[0] for s in chunk])))
        for out, (_, species, count) in zip(model.generate(z, prompt, 6), chunk):
            pred = parse_species_count(vocab.detokenize(out))
            hits += pred.ok and pred.species == species
            near += pred.ok and abs(pred.count - count) <= 1
    return hits / len(scenes), near / len(scenes)
