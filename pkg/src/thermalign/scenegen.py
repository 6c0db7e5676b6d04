"""Paired pseudo-thermal / pseudo-RGB scenes with species and count labels.

Each scene holds ``count`` non-overlapping silhouettes of a single species.
The thermal channel is a bright silhouette over a cool, low-noise background;
the RGB twin renders the same placements with vegetation texture and a
species-independent animal palette, so shape is the only species cue.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import InvalidScale, InvalidSpec, IoError, PlacementFailure

SPECIES = ("deer", "rhino", "elephant")
MAX_COUNT = 12
NOISE_SIGMA = 0.02
CONTRAST_MARGIN = 0.4
MAX_ATTEMPTS = 1000

# Animal palette shared by all species (browns and greys).
_PALETTE = np.array(
    [
        [0.55, 0.42, 0.30],
        [0.62, 0.50, 0.38],
        [0.50, 0.50, 0.50],
        [0.66, 0.64, 0.60],
        [0.45, 0.36, 0.28],
        [0.72, 0.62, 0.48],
    ]
)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    species: str
    count: int
    width: int = 64
    height: int = 64
    glyph_scale: int = 5
    allow_overlap: bool = False
    placement_margin: int = 1

    def validate(self) -> None:
        if self.species not in SPECIES:
            raise InvalidSpec(f"unknown species {self.species!r}")
        if not 1 <= self.count <= MAX_COUNT:
            raise InvalidSpec(f"count must be in [1, {MAX_COUNT}], got {self.count}")
        if self.glyph_scale < 4:
            raise InvalidScale(f"glyph_scale must be >= 4, got {self.glyph_scale}")
        if 2 * self.glyph_scale >= min(self.width, self.height):
            raise InvalidSpec("glyph_scale too large for the canvas")
        if self.placement_margin < 0:
            raise InvalidSpec("placement_margin must be >= 0")


@dataclass
class SyntheticScene:
    thermal: np.ndarray  # (H, W) in [0, 1]
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    species: str
    count: int
    seed: int
    labels: np.ndarray = field(repr=False)  # (H, W) int, 0 = background, i = glyph i

    def foreground(self, noiseless: bool = False) -> np.ndarray:
        """Pixels brighter than the background level by the contrast margin."""
        if noiseless:
            return self.labels > 0
        return foreground_mask(self.thermal)


def foreground_mask(thermal: np.ndarray) -> np.ndarray:
    background = np.median(thermal)
    return thermal > background + CONTRAST_MARGIN


def count_components(mask: np.ndarray) -> int:
    _, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    return int(n)


# ---------------------------------------------------------------------------
# glyphs
# ---------------------------------------------------------------------------


def _inside(species: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Membership test in glyph-local units (body length ~2, facing +x)."""

    def ellipse(cx, cy, a, b):
        return ((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 <= 1.0

    def box(x0, x1, y0, y1):
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)

    if species == "deer":
        body = ellipse(-0.1, 0.05, 0.68, 0.26)
        head = ellipse(0.68, 0.3, 0.22, 0.16)
        neck = box(0.35, 0.62, 0.05, 0.3)
        legs = box(-0.58, -0.4, -0.7, 0.0) | box(0.22, 0.4, -0.7, 0.0)
        return body | head | neck | legs
    if species == "rhino":
        body = ellipse(-0.12, 0.0, 0.78, 0.46)
        head = ellipse(0.62, -0.05, 0.24, 0.24)
        # horn wedge: triangle tapering forward from the snout
        horn = (x >= 0.7) & (x <= 0.98) & (np.abs(y - 0.1) <= 0.22 * (0.98 - x) / 0.28 + 0.02)
        return body | head | horn
    if species == "elephant":
        body = ellipse(-0.1, 0.05, 0.8, 0.7)
        ears = ellipse(0.35, 0.3, 0.3, 0.4)
        trunk = box(0.55, 0.92, -0.62, -0.05) & (x - 0.55 <= 0.5 * (y + 0.8))
        return body | ears | trunk | ellipse(0.74, -0.55, 0.16, 0.14)
    raise InvalidSpec(f"unknown species {species!r}")


def render_glyph(species: str, scale: int, angle: float = 0.0) -> np.ndarray:
    """Binary silhouette on a ``(2*scale+1)`` square grid, rotated by ``angle`` degrees.

    Rotation is counter-clockwise. The quarter-turn part of the angle is applied
    with an exact array rotation, so angles that differ by multiples of 90 give
    masks that are exact quarter-turns of each other.
    """
    if scale < 4:
        raise InvalidScale(f"scale must be >= 4, got {scale}")
    if not 0 <= angle < 360:
        raise InvalidSpec(f"angle must be in [0, 360), got {angle}")
    quarter, rest = divmod(float(angle), 90.0)
    offsets = np.arange(-scale, scale + 1, dtype=float)
    cols, rows = np.meshgrid(offsets, offsets)
    x, y = cols / scale, -rows / scale
    theta = np.deg2rad(rest)
    c, s = np.cos(theta), np.sin(theta)
    xr, yr = c * x + s * y, -s * x + c * y
    mask = _inside(species, xr, yr)
    mask = _largest_component(mask)
    return np.rot90(mask, int(quarter)).copy()


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n <= 1:
        return mask
    sizes = ndimage.sum(mask, labels, index=np.arange(1, n + 1))
    return labels == (int(np.argmax(sizes)) + 1)


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


def _smooth_field(rng: np.random.Generator, shape: tuple[int, ...], sigma: float) -> np.ndarray:
    raw = rng.standard_normal(shape)
    field_ = ndimage.gaussian_filter(raw, sigma=sigma, mode="wrap")
    return field_ / (np.abs(field_).max() + 1e-12)


def _place(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w, s = spec.height, spec.width, spec.glyph_scale
    labels = np.zeros((h, w), dtype=np.int32)
    occupied = np.zeros((h, w), dtype=bool)
    grow = np.ones((2 * spec.placement_margin + 1,) * 2, dtype=bool)
    size = 2 * s + 1
    for index in range(1, spec.count + 1):
        for _ in range(MAX_ATTEMPTS):
            glyph = render_glyph(spec.species, s, float(rng.uniform(0.0, 360.0)))
            top = int(rng.integers(0, h - size + 1))
            left = int(rng.integers(0, w - size + 1))
            window = (slice(top, top + size), slice(left, left + size))
            if spec.allow_overlap or not np.any(occupied[window] & glyph):
                break
        else:
            raise PlacementFailure(
                f"could not place glyph {index} of {spec.count} after {MAX_ATTEMPTS} attempts"
            )
        labels[window][glyph] = index
        footprint = np.zeros((h, w), dtype=bool)
        footprint[window] = glyph
        if spec.placement_margin:
            footprint = ndimage.binary_dilation(footprint, structure=grow)
        occupied |= footprint
    return labels


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labels = _place(spec, rng)
    h, w = labels.shape
    mask = labels > 0

    # thermal: cool background in [0, 0.2], warm bodies in [0.8, 1.0]
    base = rng.uniform(0.05, 0.15)
    thermal = base + 0.05 * _smooth_field(rng, (h, w), sigma=6.0)
    heat = rng.uniform(0.8, 1.0, size=spec.count + 1)
    thermal = np.where(mask, heat[labels], thermal)

    # rgb: textured vegetation, animals from the shared palette
    veg = np.array([0.28, 0.42, 0.2]) + rng.uniform(-0.08, 0.08, size=3)
    rgb = veg + 0.12 * _smooth_field(rng, (h, w, 3), sigma=(3.0, 3.0, 0.0))
    colors = _PALETTE[rng.integers(0, len(_PALETTE), size=spec.count + 1)]
    colors = colors * rng.uniform(0.85, 1.15, size=(spec.count + 1, 1))
    texture = 0.05 * _smooth_field(rng, (h, w), sigma=1.0)
    rgb = np.where(mask[..., None], colors[labels] + texture[..., None], rgb)

    thermal = np.clip(thermal + rng.normal(0.0, NOISE_SIGMA, size=thermal.shape), 0.0, 1.0)
    rgb = np.clip(rgb + rng.normal(0.0, NOISE_SIGMA, size=rgb.shape), 0.0, 1.0)
    return SyntheticScene(
        thermal=thermal, rgb=rgb, species=spec.species, count=spec.count, seed=spec.seed, labels=labels
    )


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


@dataclass
class CorpusConfig:
    n_per_species: int = 30
    seed: int = 1
    size: int = 64
    glyph_scale: int = 5
    species: tuple[str, ...] = SPECIES
    count_low: int = 1
    count_high: int = MAX_COUNT


def corpus_plan(config: CorpusConfig) -> list[SceneSpec]:
    """Deterministic list of scene specs; counts uniform on [count_low, count_high]."""
    if config.n_per_species < 1:
        raise InvalidSpec("n_per_species must be >= 1")
    specs = []
    for k, species in enumerate(config.species):
        species_seq = np.random.SeedSequence([config.seed, k])
        rng = np.random.default_rng(species_seq)
        counts = rng.integers(config.count_low, config.count_high + 1, size=config.n_per_species)
        seeds = rng.integers(0, 2**31 - 1, size=config.n_per_species)
        for count, seed in zip(counts, seeds):
            specs.append(
                SceneSpec(
                    seed=int(seed),
                    species=species,
                    count=int(count),
                    width=config.size,
                    height=config.size,
                    glyph_scale=config.glyph_scale,
                )
            )
    return specs


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read a PNG back as float intensities in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def generate_corpus(config: CorpusConfig, out_dir: str | os.PathLike) -> list[dict]:
    """Render every scene to PNG and write ``manifest.json``; returns the manifest records."""
    out = Path(out_dir)
    try:
        (out / "thermal").mkdir(parents=True, exist_ok=True)
        (out / "rgb").mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"{out} is not writable")
    except OSError as exc:
        raise IoError(f"cannot write corpus to {out}: {exc}") from exc

    records = []
    per_species: dict[str, int] = {}
    for spec in corpus_plan(config):
        idx = per_species.get(spec.species, 0)
        per_species[spec.species] = idx + 1
        scene = generate_scene(spec)
        stem = f"{spec.species}_{idx:05d}"
        thermal_rel = f"thermal/{stem}.png"
        rgb_rel = f"rgb/{stem}.png"
        try:
            Image.fromarray(to_uint8(scene.thermal), mode="L").save(out / thermal_rel)
            Image.fromarray(to_uint8(scene.rgb), mode="RGB").save(out / rgb_rel)
        except OSError as exc:
            raise IoError(f"cannot write image {stem}: {exc}") from exc
        records.append(
            {"image": thermal_rel, "rgb_image": rgb_rel, "species": spec.species, "count": spec.count, "seed": spec.seed}
        )
    _atomic_write_bytes(out / "manifest.json", json.dumps(records, indent=1).encode())
    return records


def load_manifest(corpus_dir: str | os.PathLike) -> list[dict]:
    with open(Path(corpus_dir) / "manifest.json") as fh:
        return json.load(fh)
