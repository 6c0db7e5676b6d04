"""Prompts, structured-output parsing, recognition/enumeration metrics and reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import AbortedRun, EmptyEvaluation, MalformedHabitat
from .scenegen import SPECIES

log = logging.getLogger(__name__)

CLOSED_SET = "closed_set"
OPEN_SET = "open_set"
HABITAT = "habitat"

_BASE_PROMPT = "Identify the species and count. Return ONLY in the format: Species; Count (example: Deer; 1)."
HABITAT_FIELD_LINES = (
    "Habitat/land cover:",
    "Key landscape features (e.g., river, road, forest edge, grassland).",
    "Human presence/disturbance (if any).",
    "Brief habitat-context interpretation (1 sentence).",
)
PROMPTS = {
    CLOSED_SET: _BASE_PROMPT + " Allowed species: deer, rhino, elephant.",
    OPEN_SET: _BASE_PROMPT,
    HABITAT: "\n".join(
        ["Describe the most important environmental context in this drone image. Return 4 lines only:"]
        + list(HABITAT_FIELD_LINES)
    ),
}
_MODE_ALIASES = {"closed": CLOSED_SET, "open": OPEN_SET}
MODE_LABELS = {CLOSED_SET: "Closed-Set", OPEN_SET: "Open-Set", HABITAT: "Habitat"}


def normalize_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in PROMPTS:
        raise ValueError(f"unknown prompt mode {mode!r}")
    return mode


def render_prompt(mode: str) -> str:
    return PROMPTS[normalize_mode(mode)]


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

OK = "ok"
MALFORMED = "malformed"
SYNONYMS = {"rhinoceros": "rhino", "rhinoceroses": "rhino"}

_ANSWER = re.compile(r"^\s*([A-Za-z]+)\s*;\s*([0-9]+)\s*\.?\s*$")


@dataclass(frozen=True)
class Prediction:
    raw_text: str
    species: str | None = None
    count: int | None = None
    parse_status: str = MALFORMED

    @property
    def ok(self) -> bool:
        return self.parse_status == OK


def normalize_species(word: str) -> str:
    word = word.lower()
    if word in SYNONYMS:
        return SYNONYMS[word]
    if word not in SPECIES and len(word) > 1 and word.endswith("s"):
        word = word[:-1]
    return SYNONYMS.get(word, word)


def parse_species_count(raw_text: Any) -> Prediction:
    """Parse ``"<Species>; <Count>"`` leniently. Never raises."""
    try:
        if isinstance(raw_text, (bytes, bytearray)):
            raw_text = bytes(raw_text).decode("utf-8", errors="replace")
        elif not isinstance(raw_text, str):
            raw_text = "" if raw_text is None else str(raw_text)
        m = _ANSWER.match(raw_text)
        if m is None:
            return Prediction(raw_text)
        return Prediction(raw_text, normalize_species(m.group(1)), int(m.group(2)), OK)
    except Exception:  # totality: anything unexpected is just malformed
        return Prediction(raw_text if isinstance(raw_text, str) else repr(raw_text))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def recognition_metrics(items: Iterable[tuple[str, Prediction]], species: Sequence[str] = SPECIES) -> dict[str, PRF]:
    items = list(items)
    if not items:
        raise EmptyEvaluation("no items to score")
    out = {}
    for s in species:
        tp = sum(1 for truth, p in items if truth == s and p.ok and p.species == s)
        fp = sum(1 for truth, p in items if truth != s and p.ok and p.species == s)
        fn = sum(1 for truth, p in items if truth == s and not (p.ok and p.species == s))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        out[s] = PRF(precision, recall, f1_score(precision, recall))
    return out


@dataclass(frozen=True)
class CountStats:
    n: int
    exact: float
    within1: float
    mae: float | None  # None when no parseable prediction exists
    unparseable_rate: float


def enumeration_metrics(
    items: Iterable[tuple[str, int, Prediction]], species: Sequence[str] = SPECIES
) -> dict[str, CountStats]:
    """Counting metrics grouped by true species; malformed items fail exact/within-1 and skip MAE."""
    items = list(items)
    if not items:
        raise EmptyEvaluation("no items to score")
    out = {}
    for s in species:
        group = [(c, p) for truth, c, p in items if truth == s]
        n = len(group)
        if n == 0:
            out[s] = CountStats(0, 0.0, 0.0, None, 0.0)
            continue
        errors = [abs(p.count - c) for c, p in group if p.ok]
        exact = sum(1 for e in errors if e == 0) / n
        within1 = sum(1 for e in errors if e <= 1) / n
        mae = sum(errors) / len(errors) if errors else None
        out[s] = CountStats(n, exact, within1, mae, (n - len(errors)) / n)
    return out


def macro(values: Iterable[float]) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0


# ---------------------------------------------------------------------------
# habitat
# ---------------------------------------------------------------------------

HABITAT_FIELDS = ("habitat_land_cover", "key_landscape_features", "human_presence", "interpretation")
_LABEL = re.compile(
    r"^\s*(?:[-*•]|\d+[.)])?\s*\**\s*"
    r"(?:habitat\s*/\s*land\s*cover|key\s+landscape\s+features|human\s+presence\s*/\s*disturbance"
    r"|brief\s+habitat-context\s+interpretation)"
    r"\s*(?:\([^)]*\))?\s*\**\s*[:.\-]?\s*\**\s*",
    re.IGNORECASE,
)


@dataclass(frozen=True)
class HabitatReport:
    habitat_land_cover: str
    key_landscape_features: str
    human_presence: str
    interpretation: str


def parse_habitat(raw_text: str) -> HabitatReport:
    lines = [ln.strip() for ln in raw_text.splitlines() if ln.strip()]
    if len(lines) != 4:
        raise MalformedHabitat(len(lines))
    values = [_LABEL.sub("", ln, count=1).strip() for ln in lines]
    if not all(values):
        raise MalformedHabitat(sum(1 for v in values if v))
    return HabitatReport(*values)


# ---------------------------------------------------------------------------
# evaluation protocol
# ---------------------------------------------------------------------------


@dataclass
class EvalItem:
    image_id: str
    image: Any  # path or array
    species: str
    count: int


@dataclass
class EvaluationResult:
    mode: str
    recognition: dict[str, PRF]
    enumeration: dict[str, CountStats]
    responses: list[dict] = field(default_factory=list)
    failures: int = 0

    @property
    def macro_f1(self) -> float:
        return macro(m.f1 for m in self.recognition.values())

    @property
    def macro_within1(self) -> float:
        return macro(m.within1 for m in self.enumeration.values())

    @property
    def macro_exact(self) -> float:
        return macro(m.exact for m in self.enumeration.values())

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "recognition": {s: asdict(m) for s, m in self.recognition.items()},
            "enumeration": {s: asdict(m) for s, m in self.enumeration.items()},
            "macro_f1": self.macro_f1,
            "macro_within1": self.macro_within1,
            "macro_exact": self.macro_exact,
            "failures": self.failures,
            "n_items": len(self.responses),
        }


def evaluate(backend, items: Sequence[EvalItem], mode: str, parallelism: int = 1, max_new_tokens: int = 8) -> EvaluationResult:
    """Prompt ``backend`` with every item, parse the answers and aggregate per-species metrics."""
    from .backends import InferenceRequest

    mode = normalize_mode(mode)
    if mode == HABITAT:
        raise ValueError("use evaluate_habitat for habitat prompts")
    items = sorted(items, key=lambda it: it.image_id)
    if not items:
        raise EmptyEvaluation("test set is empty")
    prompt = render_prompt(mode)
    requests = [InferenceRequest(it.image, prompt, max_new_tokens, it.image_id) for it in items]
    results = backend.batch_infer(requests, parallelism=parallelism)
    failures = sum(1 for r in results if r.error is not None)
    if failures * 2 > len(items):
        raise AbortedRun(f"{failures} of {len(items)} backend calls failed")

    responses, rec_items, enum_items = [], [], []
    for item, res in zip(items, results):
        if res.error is not None:
            log.warning("backend failure on %s: %s", item.image_id, res.error)
            pred = Prediction("")
        else:
            pred = parse_species_count(res.text)
        rec_items.append((item.species, pred))
        enum_items.append((item.species, item.count, pred))
        responses.append(
            {
                "image_id": item.image_id,
                "mode": mode,
                "raw_text": pred.raw_text,
                "species": pred.species,
                "count": pred.count,
                "parse_status": pred.parse_status,
                "error": None if res.error is None else str(res.error),
            }
        )
    return EvaluationResult(mode, recognition_metrics(rec_items), enumeration_metrics(enum_items), responses, failures)


def evaluate_habitat(backend, images: Sequence[tuple[str, Any]], parallelism: int = 1, max_new_tokens: int = 256) -> list[dict]:
    from .backends import InferenceRequest

    prompt = render_prompt(HABITAT)
    requests = [InferenceRequest(img, prompt, max_new_tokens, image_id) for image_id, img in images]
    out = []
    for res in backend.batch_infer(requests, parallelism=parallelism):
        entry = {"image_id": res.request_id, "raw_text": res.text, "report": None, "error": None}
        if res.error is not None:
            entry["error"] = str(res.error)
        else:
            try:
                entry["report"] = asdict(parse_habitat(res.text))
            except MalformedHabitat as exc:
                entry["error"] = str(exc)
        out.append(entry)
    return out


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

_HEAD = {"table2": ("Precision", "Recall", "F1"), "table3": ("Exact accuracy", "Within-1 accuracy", "MAE")}


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def _table_rows(results: dict[tuple[str, str], EvaluationResult], kind: str) -> list[list[str]]:
    groups = _HEAD[kind]
    header1 = ["Model", "Prompt"]
    for g in groups:
        header1 += [g, "", ""]
    header2 = ["", ""] + [s.capitalize() for s in SPECIES] * len(groups)
    rows = [header1, header2]
    for (model_name, mode), res in results.items():
        row = [model_name, MODE_LABELS.get(mode, mode)]
        if kind == "table2":
            for attr in ("precision", "recall", "f1"):
                row += [_fmt(getattr(res.recognition[s], attr)) for s in SPECIES]
        else:
            for attr in ("exact", "within1", "mae"):
                row += [
                    _fmt(0.0 if res.enumeration[s].n == 0 else getattr(res.enumeration[s], attr))
                    for s in SPECIES
                ]
        rows.append(row)
    return rows


def format_report(results: dict[tuple[str, str], EvaluationResult]) -> dict[str, str]:
    """Render recognition (table2) and enumeration (table3) tables as CSV text.

    ``results`` maps ``(model name, prompt mode)`` to a result; insertion order is kept.
    """
    if not results:
        raise EmptyEvaluation("no results to report")
    out = {}
    for kind in _HEAD:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(_table_rows(results, kind))
        out[kind] = buf.getvalue()
    return out


def format_text_table(csv_text: str) -> str:
    rows = list(csv.reader(io.StringIO(csv_text)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def write_evaluation(results: dict[tuple[str, str], EvaluationResult], out_dir: str | os.PathLike) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {f"{name}|{mode}": res.to_dict() for (name, mode), res in results.items()}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    tables = format_report(results)
    (out / "table2.csv").write_text(tables["table2"])
    (out / "table3.csv").write_text(tables["table3"])
    with open(out / "responses.jsonl", "w") as fh:
        for (name, _), res in results.items():
            for r in res.responses:
                fh.write(json.dumps({"model": name, **r}, sort_keys=True) + "\n")


def load_results(out_dir: str | os.PathLike) -> dict[tuple[str, str], EvaluationResult]:
    """Rebuild results from ``metrics.json`` and ``responses.jsonl``."""
    out = Path(out_dir)
    metrics = json.loads((out / "metrics.json").read_text())
    responses: dict[tuple[str, str], list[dict]] = {}
    resp_path = out / "responses.jsonl"
    if resp_path.exists():
        for line in resp_path.read_text().splitlines():
            r = json.loads(line)
            name = r.pop("model")
            responses.setdefault((name, r["mode"]), []).append(r)
    results = {}
    for key, m in metrics.items():
        name, mode = key.rsplit("|", 1)
        results[(name, mode)] = EvaluationResult(
            mode,
            {s: PRF(**v) for s, v in m["recognition"].items()},
            {s: CountStats(**v) for s, v in m["enumeration"].items()},
            responses.get((name, mode), []),
            m["failures"],
        )
    return results
