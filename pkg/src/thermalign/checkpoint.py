"""Checkpoint directories: ``weights.npz`` plus ``meta.json`` with config, vocabulary and digests."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from .errors import SchemaError
from .model import ModelConfig, ToyVLM, tensor_digest
from .tokenizer import Vocabulary

FORMAT = "thermalign-checkpoint"
VERSION = 1


def save_checkpoint(model: ToyVLM, path: str | os.PathLike, extra: dict | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    np.savez(out / "weights.npz", **{name: t.detach().cpu().numpy() for name, t in state.items()})
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "config": model.config_dict(),
        "vocabulary": list(model.vocab.tokens),
        "digests": {name: tensor_digest(t) for name, t in state.items()},
        "trainable": sorted(n for n, p in model.named_parameters() if p.requires_grad),
        "extra": extra or {},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return out


def read_meta(path: str | os.PathLike) -> dict:
    try:
        meta = json.loads((Path(path) / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"unreadable checkpoint metadata: {exc}", locus=str(path)) from exc
    if meta.get("format") != FORMAT or meta.get("version") != VERSION:
        raise SchemaError("not a supported checkpoint", locus=str(path))
    return meta


def load_checkpoint(path: str | os.PathLike) -> ToyVLM:
    """Rebuild a model and verify every tensor against its stored digest."""
    meta = read_meta(path)
    model = ToyVLM(ModelConfig(**meta["config"]), Vocabulary(tuple(meta["vocabulary"])))
    with np.load(Path(path) / "weights.npz") as arrays:
        state = {name: torch.from_numpy(arrays[name].copy()) for name in arrays.files}
    for name, t in state.items():
        if meta["digests"].get(name) != tensor_digest(t):
            raise SchemaError("tensor digest mismatch", locus=f"{path}:{name}")
    model.load_state_dict(state)
    trainable = set(meta.get("trainable", []))
    for name, p in model.named_parameters():
        p.requires_grad_(name in trainable)
    return model
