"""Toy vision-language model: frozen vision encoder, trainable projector, frozen causal LM.

Sequence layout fed to the language model is ``[visual tokens] [<bos> prompt] [target]``;
visual tokens are prepended and every position attends causally.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptyTarget, ShapeError
from .tokenizer import Vocabulary


@dataclass
class ModelConfig:
    vocab_size: int = 64
    image_size: int = 64
    patch_size: int = 8
    d_vision: int = 64
    d_hidden: int = 128
    d_model: int = 128
    vision_heads: int = 4
    lm_heads: int = 4
    lm_layers: int = 2
    mlp_ratio: int = 4
    max_positions: int = 160
    dtype: str = "float32"

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, causal: bool):
        super().__init__()
        self.heads = heads
        self.causal = causal
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(self.norm1(x)).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = F.scaled_dot_product_attention(q, k, v, is_causal=self.causal)
        x = x + self.out(att.transpose(1, 2).reshape(b, n, d))
        return x + self.mlp(self.norm2(x))


class VisionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch = cfg.patch_size
        self.embed = nn.Linear(3 * cfg.patch_size**2, cfg.d_vision)
        self.pos = nn.Parameter(torch.randn(cfg.num_patches, cfg.d_vision) * 0.02)
        self.block = Block(cfg.d_vision, cfg.vision_heads, cfg.mlp_ratio, causal=False)
        self.norm = nn.LayerNorm(cfg.d_vision)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        # images: (B, 3, H, W), already centred
        b, c, h, w = images.shape
        p = self.patch
        patches = images.unfold(2, p, p).unfold(3, p, p)  # B, C, H/p, W/p, p, p
        patches = patches.permute(0, 2, 3, 1, 4, 5).reshape(b, (h // p) * (w // p), c * p * p)
        x = self.embed(patches) + self.pos
        return self.norm(self.block(x))


class Projector(nn.Module):
    """Two affine maps with a GELU between them, applied per patch."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class CausalLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos = nn.Parameter(torch.randn(cfg.max_positions, cfg.d_model) * 0.02)
        self.blocks = nn.ModuleList(
            Block(cfg.d_model, cfg.lm_heads, cfg.mlp_ratio, causal=True) for _ in range(cfg.lm_layers)
        )
        self.norm = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size)
        nn.init.normal_(self.embed.weight, std=0.02)
        nn.init.normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def forward(self, visual: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        x = torch.cat([visual, self.embed(ids)], dim=1)
        if x.shape[1] > self.pos.shape[0]:
            raise ShapeError(f"sequence length {x.shape[1]} exceeds {self.pos.shape[0]} positions")
        x = x + self.pos[: x.shape[1]]
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x))


def target_nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """``-sum log softmax(logits)[t, targets[t]]``; logits row t predicts ``targets[t]``."""
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1).sum(-1)


class ToyVLM(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, vocab: Vocabulary | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.vocab = vocab or Vocabulary()
        if len(self.vocab) != self.cfg.vocab_size:
            raise ShapeError(f"vocabulary has {len(self.vocab)} tokens, config expects {self.cfg.vocab_size}")
        if self.cfg.image_size % self.cfg.patch_size:
            raise ShapeError("image_size must be divisible by patch_size")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = VisionEncoder(self.cfg)
            self.projector = Projector(self.cfg.d_vision, self.cfg.d_hidden, self.cfg.d_model)
            self.lm = CausalLM(self.cfg)
        self.to(self.cfg.torch_dtype)

    # -- weights ----------------------------------------------------------

    def reset_projector(self, seed: int) -> None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            fresh = Projector(self.cfg.d_vision, self.cfg.d_hidden, self.cfg.d_model)
        self.projector.load_state_dict(fresh.to(self.cfg.torch_dtype).state_dict())

    def freeze_backbones(self) -> None:
        self.encoder.requires_grad_(False)
        self.lm.requires_grad_(False)
        self.projector.requires_grad_(True)

    def backbone_digests(self) -> dict[str, str]:
        return {
            name: tensor_digest(t)
            for name, t in self.state_dict().items()
            if name.startswith(("encoder.", "lm."))
        }

    # -- forward pieces ---------------------------------------------------

    def prepare_images(self, images) -> torch.Tensor:
        """Accept (H,W), (H,W,3), (B,H,W) or (B,H,W,3) intensities; return (B,3,H,W) centred."""
        x = torch.as_tensor(np.asarray(images), dtype=self.cfg.torch_dtype)
        if x.ndim == 2 or (x.ndim == 3 and x.shape[-1] == 3 and x.shape[0] != 3 and _looks_single(x, self.cfg)):
            x = x.unsqueeze(0)
        if x.ndim == 3:
            x = x.unsqueeze(-1)
        if x.ndim != 4 or x.shape[-1] not in (1, 3):
            raise ShapeError(f"unsupported image shape {tuple(x.shape)}")
        if x.shape[-1] == 1:
            x = x.expand(-1, -1, -1, 3)
        b, h, w, _ = x.shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
        if (h // p) * (w // p) != self.cfg.num_patches:
            raise ShapeError(f"image {h}x{w} does not match encoder input {self.cfg.image_size}")
        return (x.permute(0, 3, 1, 2) - 0.5).contiguous()

    def encode_image(self, images) -> torch.Tensor:
        return self.encoder(self.prepare_images(images))

    def project(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.cfg.d_vision:
            raise ShapeError(f"expected {self.cfg.d_vision} feature columns, got {features.shape[-1]}")
        return self.projector(features)

    def logits(self, visual: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        if visual.ndim == 2:
            visual = visual.unsqueeze(0)
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.ndim == 1:
            ids = ids.unsqueeze(0)
        return self.lm(visual, ids)

    def sequence_loss(self, z: torch.Tensor, prompt_ids, target_ids) -> torch.Tensor:
        """Summed negative log-likelihood of the target tokens only."""
        prompt_ids = list(prompt_ids)
        target_ids = list(target_ids)
        if not target_ids:
            raise EmptyTarget("target sequence is empty")
        ids = torch.tensor(prompt_ids + target_ids, dtype=torch.long)
        logits = self.logits(z, ids)[0]
        n_vis = logits.shape[0] - len(ids)
        start = n_vis + len(prompt_ids) - 1
        return target_nll(logits[start : start + len(target_ids)], torch.tensor(target_ids))

    def batch_loss(self, z: torch.Tensor, ids: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
        """Per-example summed target NLL for right-padded batches.

        ``target_mask[b, j]`` marks ``ids[b, j]`` as a target token.
        """
        logits = self.lm(z, ids)
        n_vis = z.shape[1]
        pred = logits[:, n_vis - 1 : -1]  # row j predicts ids[:, j]
        logp = torch.log_softmax(pred, dim=-1).gather(-1, ids.unsqueeze(-1)).squeeze(-1)
        return -(logp * target_mask).sum(-1)

    @torch.no_grad()
    def generate(self, z: torch.Tensor, prompt_ids, max_new_tokens: int = 8) -> list[list[int]]:
        """Greedy decoding; returns the continuation per example with EOS stripped."""
        if max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if z.ndim == 2:
            z = z.unsqueeze(0)
        ids = torch.as_tensor(prompt_ids, dtype=torch.long)
        if ids.ndim == 1:
            ids = ids.unsqueeze(0).expand(z.shape[0], -1)
        outputs: list[list[int]] = [[] for _ in range(z.shape[0])]
        done = torch.zeros(z.shape[0], dtype=torch.bool)
        eos = self.vocab.eos
        for _ in range(max_new_tokens):
            if ids.shape[1] + z.shape[1] >= self.cfg.max_positions:
                break
            nxt = self.lm(z, ids)[:, -1].argmax(-1)
            for b in range(z.shape[0]):
                if not done[b]:
                    if int(nxt[b]) == eos:
                        done[b] = True
                    else:
                        outputs[b].append(int(nxt[b]))
            if bool(done.all()):
                break
            ids = torch.cat([ids, nxt.unsqueeze(1)], dim=1)
        return outputs

    def config_dict(self) -> dict:
        return asdict(self.cfg)


def _looks_single(x: torch.Tensor, cfg: ModelConfig) -> bool:
    # a (H, W, 3) image rather than a batch of three (H, W) images
    return x.shape[0] != 3 or x.shape[1] != cfg.image_size


def tensor_digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


@dataclass
class PartitionReport:
    trained_params: int
    total_params: int
    trained_tensors: int
    frozen_tensors: int
    trainable_modules: str

    COLUMNS = ("Trained parameters", "Trained (%)", "Trained tensors", "Frozen tensors", "Trainable modules")

    @property
    def trained_pct(self) -> float:
        if self.total_params == 0:
            return 0.0
        return round(100.0 * self.trained_params / self.total_params, 3)

    def values(self) -> tuple[str, ...]:
        return (
            f"{self.trained_params:,}",
            f"{self.trained_pct:.3f}%",
            str(self.trained_tensors),
            str(self.frozen_tensors),
            self.trainable_modules,
        )

    def row(self) -> str:
        return " / ".join(self.values())

    def as_dict(self) -> dict[str, str]:
        return dict(zip(self.COLUMNS, self.values()))


_MODULE_LABELS = {"projector": "Projector/MLP", "encoder": "Vision/Encoder", "lm": "LM/Backbone"}


def parameter_partition(model: nn.Module) -> PartitionReport:
    trained = total = n_trained = n_frozen = 0
    modules: list[str] = []
    for name, p in model.named_parameters():
        total += p.numel()
        if p.requires_grad:
            trained += p.numel()
            n_trained += 1
            top = name.split(".", 1)[0]
            label = _MODULE_LABELS.get(top, top)
            if label not in modules:
                modules.append(label)
        else:
            n_frozen += 1
    return PartitionReport(trained, total, n_trained, n_frozen, ", ".join(modules) or "-")


def uniform_loss(vocab_size: int, length: int) -> float:
    return length * math.log(vocab_size)
