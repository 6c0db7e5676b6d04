"""End-to-end stages operating on a run directory.

Layout::

    <run>/config.yaml            resolved configuration echo
    <run>/data/                  thermal/, rgb/, augmented/, manifest.json
    <run>/dataset/               train/val/test ShareGPT files, records, manifest
    <run>/pretrain/              backbone checkpoint + pretrain.json
    <run>/align/steps-<N>/       curves/, checkpoints/step-<k>/, selected.txt
    <run>/eval/<tag>/            metrics.json, table2.csv, table3.csv, responses.jsonl
    <run>/report/                combined tables, table1.csv, loss-curve SVGs
    <run>/habitat/               habitat.jsonl
"""
from __future__ import annotations

import datetime as _dt
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path

from . import dataset as ds
from .backends import LocalBackend, RemoteBackend, RemoteConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PipelineConfig, dump_config
from .errors import ConfigError, ThermalignError
from .evalkit import (
    EvalItem,
    EvaluationResult,
    evaluate,
    evaluate_habitat,
    format_report,
    load_results,
    normalize_mode,
    parse_species_count,
    write_evaluation,
)
from .model import ToyVLM
from .pretrain import PretrainConfig, pretrain_backbones, source_corpus, source_samples
from .scenegen import CorpusConfig, generate_corpus, load_manifest
from .train import LossCurve, encode_examples, plot_loss_curves, train_projector

log = logging.getLogger(__name__)

BASELINE = "ToyVLM"
TUNED = "ToyVLM-Tuned"


class StageError(ThermalignError, RuntimeError):
    pass


def new_run_dir(cfg: PipelineConfig) -> Path:
    root = Path(cfg.output_root)
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-seed{cfg.seed}"
    run, n = base, 1
    while run.exists():
        n += 1
        run = base.with_name(f"{base.name}-{n}")
    run.mkdir(parents=True)
    dump_config(cfg, run / "config.yaml")
    return run


def _fresh(path: Path) -> Path:
    if path.exists():
        raise StageError(f"{path} already exists; run directories are never overwritten")
    path.mkdir(parents=True)
    return path


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"{path} is missing; run the {stage} stage first")
    return path


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def gen_data(cfg: PipelineConfig, run: Path) -> str:
    sg = cfg.scenegen
    corpus = CorpusConfig(
        n_per_species=sg.n_per_species,
        seed=cfg.seed,
        size=sg.size,
        glyph_scale=sg.glyph_scale,
        count_low=sg.count_low,
        count_high=sg.count_high,
    )
    records = generate_corpus(corpus, _fresh(run / "data"))
    return f"gen-data: {len(records)} scenes ({sg.n_per_species} per species) -> {run / 'data'}"


def build_dataset(cfg: PipelineConfig, run: Path) -> str:
    data = _require(run / "data", "gen-data")
    records = ds.records_from_manifest(load_manifest(data))
    d = cfg.dataset
    built = ds.build_dataset(
        records,
        seed=cfg.seed,
        ratios=tuple(d.ratios),
        balance=d.balance,
        split_order=d.split_order,
        prompt_mode=d.prompt_mode,
    )
    all_records = [r for rs in built.records.values() for r in rs]
    ds.materialize_augmented(all_records, data)
    out = _fresh(run / "dataset")
    ds.persist(built, out)
    sizes = built.manifest.split_sizes
    return (
        f"build-dataset: train/val/test = {sizes['train']}/{sizes['val']}/{sizes['test']}, "
        f"leakage {built.manifest.leakage}"
    )


def pretrain(cfg: PipelineConfig, run: Path) -> str:
    p = cfg.pretrain
    model = ToyVLM(cfg.model, seed=cfg.seed)
    scenes = source_corpus(p.n_source_per_species, cfg.seed + 1000, cfg.scenegen.size, cfg.scenegen.glyph_scale)
    heldout = source_corpus(p.holdout_per_species, cfg.seed + 2000, cfg.scenegen.size, cfg.scenegen.glyph_scale)
    samples = source_samples(scenes, model, cfg.seed)
    pcfg = PretrainConfig(steps=p.steps, batch_size=p.batch_size, peak_lr=p.peak_lr, warmup_steps=p.warmup_steps, seed=cfg.seed)
    result = pretrain_backbones(model, samples, pcfg, heldout=heldout)
    out = _fresh(run / "pretrain")
    save_checkpoint(model, out / "checkpoint", extra={"stage": "pretrain"})
    (out / "pretrain.json").write_text(json.dumps(asdict(result), indent=1))
    return (
        f"pretrain: {p.steps} steps, loss/token {result.losses[0]:.3f} -> {result.losses[-1]:.3f}, "
        f"held-out species acc {result.heldout_accuracy:.3f}, within-1 {result.heldout_within1:.3f}"
    )


def _load_dataset(run: Path) -> ds.Dataset:
    return ds.load(_require(run / "dataset", "build-dataset"))


def align(cfg: PipelineConfig, run: Path, max_steps: int | None = None, eval_interval: int | None = None) -> str:
    tcfg = replace(
        cfg.align,
        max_steps=max_steps or cfg.align.max_steps,
        eval_interval=eval_interval or cfg.align.eval_interval,
        seed=cfg.seed,
    )
    model = load_checkpoint(_require(run / "pretrain", "pretrain") / "checkpoint")
    data = _load_dataset(run)
    train = encode_examples(data.splits["train"], run / "data", model.vocab)
    val = encode_examples(data.splits["val"], run / "data", model.vocab)
    out = _fresh(run / "align" / f"steps-{tcfg.max_steps}")
    art = train_projector(model, train, val, tcfg, run_dir=out)
    return (
        f"align: {tcfg.max_steps} steps, train loss {art.train_curve.values[0]:.3f} -> "
        f"{art.train_curve.values[-1]:.3f}, selected step {art.selected_step}, "
        f"trained {art.partition.trained_pct:.3f}% of parameters"
    )


def load_test_items(run: Path) -> list[EvalItem]:
    data = _load_dataset(run)
    items = []
    for ex in data.splits["test"]:
        pred = parse_species_count(ex.assistant_text)
        items.append(EvalItem(Path(ex.images[0]).stem, run / "data" / ex.images[0], pred.species, pred.count))
    return items


def align_tags(run: Path) -> list[str]:
    root = run / "align"
    if not root.exists():
        return []
    return sorted((p.name for p in root.iterdir() if (p / "selected.txt").exists()), key=lambda t: int(t.split("-")[1]))


def _tuned_name(cfg: PipelineConfig, tag: str) -> str:
    steps = int(tag.split("-")[1])
    return TUNED if steps == cfg.align.max_steps else f"{TUNED}-{steps}"


def run_eval(
    cfg: PipelineConfig,
    run: Path,
    backend: str | None = None,
    modes: tuple[str, ...] | None = None,
    align_tag: str | None = None,
) -> str:
    backend = backend or cfg.eval.backend
    modes = tuple(normalize_mode(m) for m in (modes or cfg.eval.modes))
    lines = []
    if backend == "remote":
        remote = RemoteBackend(RemoteConfig(**asdict(cfg.eval.remote)))
        if not cfg.eval.remote.model:
            raise ConfigError("eval.remote.model must name the served model")
        items = load_test_items(run)
        name = cfg.eval.remote.model
        results = {(name, m): evaluate(remote, items, m, cfg.eval.parallelism, cfg.eval.max_new_tokens) for m in modes}
        write_evaluation(results, _fresh(run / "eval" / f"remote-{name.replace('/', '_')}"))
        lines += [_summary(name, m, r) for (name, m), r in results.items()]
        return "\n".join(lines)

    items = load_test_items(run)
    tags = [align_tag] if align_tag else align_tags(run)
    if not tags:
        raise StageError("no finished alignment run; run the align stage first")
    pre = load_checkpoint(_require(run / "pretrain", "pretrain") / "checkpoint")
    baseline = LocalBackend(pre)
    for tag in tags:
        align_dir = _require(run / "align" / tag, "align")
        selected = int((align_dir / "selected.txt").read_text())
        tuned = LocalBackend.from_checkpoint(align_dir / "checkpoints" / f"step-{selected}")
        results: dict[tuple[str, str], EvaluationResult] = {}
        for m in modes:
            results[(BASELINE, m)] = evaluate(baseline, items, m, 1, cfg.eval.max_new_tokens)
        name = _tuned_name(cfg, tag)
        for m in modes:
            results[(name, m)] = evaluate(tuned, items, m, 1, cfg.eval.max_new_tokens)
        write_evaluation(results, _fresh(run / "eval" / tag))
        lines += [_summary(n, m, r) for (n, m), r in results.items()]
    return "\n".join(lines)


def _summary(name: str, mode: str, r: EvaluationResult) -> str:
    return (
        f"eval: {name} [{mode}] macro-F1 {r.macro_f1:.3f}, macro within-1 {r.macro_within1:.3f}, "
        f"macro exact {r.macro_exact:.3f}, unparseable {sum(1 for x in r.responses if x['parse_status'] != 'ok')}"
    )


def report(run: Path) -> str:
    """Combine evaluations and loss curves into ``<run>/report``; inputs are read only."""
    eval_root = _require(run / "eval", "eval")
    combined: dict[tuple[str, str], EvaluationResult] = {}
    for d in sorted(p for p in eval_root.iterdir() if (p / "metrics.json").exists()):
        for key, res in load_results(d).items():
            combined.setdefault(key, res)
    out = run / "report"
    out.mkdir(exist_ok=True)
    tables = format_report(combined)
    (out / "table2.csv").write_text(tables["table2"])
    (out / "table3.csv").write_text(tables["table3"])
    rows = ["Model,Trained parameters,Trained (%),Trained tensors,Frozen tensors,Trainable modules"]
    plots = 0
    for tag in align_tags(run):
        align_dir = run / "align" / tag
        part = json.loads((align_dir / "partition.json").read_text())
        rows.append(",".join([f"{TUNED} ({tag})"] + [f'"{v}"' if "," in v else v for v in part.values()]))
        train = LossCurve.read_csv(align_dir / "curves" / "train.csv", "train")
        val = LossCurve.read_csv(align_dir / "curves" / "val.csv", "val")
        plot_loss_curves(train, val, out / f"loss-{tag}.svg")
        plots += 1
    (out / "table1.csv").write_text("\n".join(rows) + "\n")
    return f"report: {len(combined)} result rows, {plots} loss-curve plot(s) -> {out}"


def habitat(cfg: PipelineConfig, run: Path, backend: str = "remote") -> str:
    if backend != "remote":
        raise StageError("habitat prompts need a remote backend; the toy vocabulary cannot express them")
    if not cfg.eval.remote.model:
        raise ConfigError("eval.remote.model must name the served model")
    remote = RemoteBackend(RemoteConfig(**asdict(cfg.eval.remote)))
    data = _load_dataset(run)
    records = data.records.get("test", [])
    images = [(r.image_id, run / "data" / r.rgb_path) for r in records if r.rgb_path]
    if not images:
        raise StageError("no paired RGB images in the test split")
    entries = evaluate_habitat(remote, images, cfg.eval.parallelism)
    out = _fresh(run / "habitat")
    with open(out / "habitat.jsonl", "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    ok = sum(1 for e in entries if e["report"] is not None)
    return f"habitat: {ok}/{len(entries)} parsed reports -> {out / 'habitat.jsonl'}"
