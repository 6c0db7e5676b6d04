"""Class balancing, stratified splitting and ShareGPT-style conversation files."""
from __future__ import annotations

import json
import logging
import os
import re
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import EmptyClass, EmptyDataset, InvalidRotation, SchemaError
from .evalkit import parse_species_count, render_prompt
from .scenegen import SPECIES, load_image, to_uint8

log = logging.getLogger(__name__)

IMAGE_TOKEN = "<image>"
SPLITS = ("train", "val", "test")
ASSISTANT_FORMAT = re.compile(r"^[A-Z][a-z]+; [0-9]+$")


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    image_path: str
    species: str
    count: int
    augmented_from: str | None = None
    rotation_k: int | None = None
    rgb_path: str | None = None


@dataclass(frozen=True)
class ConversationExample:
    images: list[str]
    user_text: str
    assistant_text: str

    @property
    def prompt(self) -> str:
        """User text with the leading image placeholder removed."""
        return self.user_text.split("\n", 1)[1] if self.user_text.startswith(IMAGE_TOKEN + "\n") else self.user_text

    def to_json(self) -> dict:
        return {
            "images": list(self.images),
            "messages": [
                {"role": "user", "content": self.user_text},
                {"role": "assistant", "content": self.assistant_text},
            ],
        }


@dataclass
class DatasetManifest:
    seed: int
    ratios: tuple[float, float, float]
    split_sizes: dict[str, int]
    per_species: dict[str, dict[str, int]]
    split_order: str = "augment-first"
    prompt_mode: str = "mixed"
    leakage: int = 0


@dataclass
class Dataset:
    splits: dict[str, list[ConversationExample]]
    manifest: DatasetManifest
    records: dict[str, list[AnnotationRecord]] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def rotate_augment(image: np.ndarray, k: int) -> np.ndarray:
    """Counter-clockwise rotation by ``k`` quarter turns (k in 1..3)."""
    if k not in (1, 2, 3):
        raise InvalidRotation(f"k must be 1, 2 or 3, got {k}")
    return np.rot90(image, k).copy()


def records_from_manifest(entries: Sequence[dict]) -> list[AnnotationRecord]:
    return [
        AnnotationRecord(
            image_id=Path(e["image"]).stem,
            image_path=e["image"],
            species=e["species"],
            count=int(e["count"]),
            rgb_path=e.get("rgb_image"),
        )
        for e in entries
    ]


def _by_species(records: Sequence[AnnotationRecord]) -> dict[str, list[AnnotationRecord]]:
    groups: dict[str, list[AnnotationRecord]] = {s: [] for s in SPECIES}
    for r in records:
        if r.species not in groups:
            raise SchemaError(f"unknown species {r.species!r}", locus=r.image_id)
        groups[r.species].append(r)
    return groups


def balance_classes(records: Sequence[AnnotationRecord], seed: int) -> list[AnnotationRecord]:
    """Top up every species to the largest class size with rotated copies of its originals."""
    groups = _by_species(records)
    for s, group in groups.items():
        if not group:
            raise EmptyClass(f"no records for species {s!r}")
    target = max(len(g) for g in groups.values())
    rng = np.random.default_rng(seed)
    out = list(records)
    for s in SPECIES:
        originals = [r for r in groups[s] if r.augmented_from is None] or groups[s]
        for i in range(target - len(groups[s])):
            src = originals[int(rng.integers(len(originals)))]
            k = int(rng.integers(1, 4))
            new_id = f"{src.image_id}-aug{i:04d}-r{k}"
            out.append(
                AnnotationRecord(
                    image_id=new_id,
                    image_path=f"augmented/{new_id}.png",
                    species=s,
                    count=src.count,
                    augmented_from=src.image_id,
                    rotation_k=k,
                    rgb_path=None,
                )
            )
    return out


def materialize_augmented(records: Sequence[AnnotationRecord], root: str | os.PathLike) -> None:
    """Write the rotated PNG for every augmented record under ``root``."""
    root = Path(root)
    index = {r.image_id: r for r in records}
    for r in records:
        if r.augmented_from is None:
            continue
        src = index.get(r.augmented_from)
        if src is None:
            raise SchemaError("augmented record references a missing original", locus=r.image_id)
        dest = root / r.image_path
        dest.parent.mkdir(parents=True, exist_ok=True)
        with Image.open(root / src.image_path) as im:
            pixels = np.asarray(im)
        Image.fromarray(rotate_augment(pixels, r.rotation_k)).save(dest)


def load_record_image(record: AnnotationRecord, root: str | os.PathLike) -> np.ndarray:
    return load_image(Path(root) / record.image_path)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def split_sizes(n: int, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    # small epsilon guards against 0.1 * 10 = 0.9999...
    train = int(np.floor(ratios[0] * n + 1e-9))
    val = int(np.floor(ratios[1] * n + 1e-9))
    return train, val, n - train - val


def split_dataset(
    records: Sequence[AnnotationRecord], ratios: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[list[AnnotationRecord], list[AnnotationRecord], list[AnnotationRecord]]:
    """Per-species shuffled split with floor/floor/remainder sizes."""
    if not records:
        raise EmptyDataset("no records to split")
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for s, group in _by_species(records).items():
        if not group:
            continue
        order = rng.permutation(len(group))
        shuffled = [group[i] for i in order]
        n_train, n_val, _ = split_sizes(len(group), ratios)
        train += shuffled[:n_train]
        val += shuffled[n_train : n_train + n_val]
        test += shuffled[n_train + n_val :]
    return train, val, test


def leakage_count(splits: dict[str, Sequence[AnnotationRecord]]) -> int:
    """Augmented records whose original sits in a different split."""
    where = {r.image_id: name for name, rs in splits.items() for r in rs}
    return sum(
        1
        for name, rs in splits.items()
        for r in rs
        if r.augmented_from is not None and where.get(r.augmented_from, name) != name
    )


# ---------------------------------------------------------------------------
# conversation format
# ---------------------------------------------------------------------------


def assistant_text(species: str, count: int) -> str:
    return f"{species.capitalize()}; {count}"


def to_sharegpt(record: AnnotationRecord, prompt_mode: str) -> ConversationExample:
    return ConversationExample(
        images=[record.image_path],
        user_text=f"{IMAGE_TOKEN}\n{render_prompt(prompt_mode)}",
        assistant_text=assistant_text(record.species, record.count),
    )


def _modes_for(records: Sequence[AnnotationRecord], prompt_mode: str, rng: np.random.Generator) -> list[str]:
    if prompt_mode == "mixed":
        return ["closed" if b else "open" for b in rng.integers(0, 2, size=len(records))]
    return [prompt_mode] * len(records)


def build_dataset(
    records: Sequence[AnnotationRecord],
    *,
    seed: int = 0,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    balance: bool = True,
    split_order: str = "augment-first",
    prompt_mode: str = "mixed",
) -> Dataset:
    """Balance, split and convert records into conversation examples.

    ``split_order="split-first"`` balances only the training split, which keeps
    rotated siblings of validation/test images out of training.
    """
    if split_order not in ("augment-first", "split-first"):
        raise ValueError(f"unknown split order {split_order!r}")
    if split_order == "augment-first":
        pool = balance_classes(records, seed) if balance else list(records)
        train, val, test = split_dataset(pool, ratios, seed)
    else:
        train, val, test = split_dataset(records, ratios, seed)
        if balance:
            train = balance_classes(train, seed)
    parts = {"train": train, "val": val, "test": test}
    leaks = leakage_count(parts)
    log.info("leakage audit (%s): %d augmented records split away from their original", split_order, leaks)

    rng = np.random.default_rng(seed + 1)
    splits = {
        name: [to_sharegpt(r, m) for r, m in zip(rs, _modes_for(rs, prompt_mode, rng))] for name, rs in parts.items()
    }
    manifest = DatasetManifest(
        seed=seed,
        ratios=tuple(ratios),
        split_sizes={name: len(rs) for name, rs in parts.items()},
        per_species={name: _species_counts(rs) for name, rs in parts.items()},
        split_order=split_order,
        prompt_mode=prompt_mode,
        leakage=leaks,
    )
    return Dataset(splits, manifest, parts)


def _species_counts(items) -> dict[str, int]:
    out = {s: 0 for s in SPECIES}
    for it in items:
        species = it.species if isinstance(it, AnnotationRecord) else parse_species_count(it.assistant_text).species
        out[species] = out.get(species, 0) + 1
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def persist(dataset: Dataset, path: str | os.PathLike) -> None:
    """Write ``<split>.json`` ShareGPT files, ``records.json`` and ``manifest.json``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        examples = dataset.splits.get(name, [])
        _atomic_write_text(root / f"{name}.json", json.dumps([e.to_json() for e in examples], indent=1))
    if dataset.records:
        records = {name: [asdict(r) for r in rs] for name, rs in dataset.records.items()}
        _atomic_write_text(root / "records.json", json.dumps(records, indent=1))
    _atomic_write_text(root / "manifest.json", json.dumps(asdict(dataset.manifest), indent=1))


def _read_json(path: Path):
    try:
        text = path.read_text()
    except OSError as exc:
        raise SchemaError(f"cannot read {path.name}: {exc}", locus=str(path)) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", locus=f"{path.name}:{exc.lineno}:{exc.colno}") from exc


def _parse_example(obj, locus: str) -> ConversationExample:
    if not isinstance(obj, dict) or set(obj) != {"images", "messages"}:
        raise SchemaError("record must have exactly the keys 'images' and 'messages'", locus)
    images = obj["images"]
    if not (isinstance(images, list) and len(images) == 1 and isinstance(images[0], str)):
        raise SchemaError("'images' must be a list holding one path", locus)
    msgs = obj["messages"]
    if not (
        isinstance(msgs, list)
        and len(msgs) == 2
        and all(isinstance(m, dict) and set(m) == {"role", "content"} for m in msgs)
        and [m["role"] for m in msgs] == ["user", "assistant"]
        and all(isinstance(m["content"], str) for m in msgs)
    ):
        raise SchemaError("'messages' must be one user then one assistant message", locus)
    if not msgs[0]["content"].startswith(IMAGE_TOKEN):
        raise SchemaError("user message must start with the image placeholder", locus)
    if not ASSISTANT_FORMAT.match(msgs[1]["content"]):
        raise SchemaError(f"assistant text {msgs[1]['content']!r} is not 'Species; N'", locus)
    return ConversationExample(images=list(images), user_text=msgs[0]["content"], assistant_text=msgs[1]["content"])


def load(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    splits = {}
    for name in SPLITS:
        data = _read_json(root / f"{name}.json")
        if not isinstance(data, list):
            raise SchemaError("top level must be an array", locus=f"{name}.json")
        splits[name] = [_parse_example(obj, f"{name}.json[{i}]") for i, obj in enumerate(data)]
    raw = _read_json(root / "manifest.json")
    try:
        manifest = DatasetManifest(**{**raw, "ratios": tuple(raw["ratios"])})
    except (TypeError, KeyError) as exc:
        raise SchemaError(f"bad manifest: {exc}", locus="manifest.json") from exc
    for name in SPLITS:
        derived = len(splits[name])
        if manifest.split_sizes.get(name) != derived:
            raise SchemaError(
                f"manifest says {manifest.split_sizes.get(name)} {name} examples, file has {derived}",
                locus="manifest.json",
            )
        if manifest.per_species.get(name) != _species_counts(splits[name]):
            raise SchemaError(f"per-species counts for {name} disagree with records", locus="manifest.json")
    records = {}
    if (root / "records.json").exists():
        raw_records = _read_json(root / "records.json")
        records = {name: [AnnotationRecord(**r) for r in rs] for name, rs in raw_records.items()}
    return Dataset(splits, manifest, records)


def write_image(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)
