import json
from pathlib import Path

import pytest
import yaml

from thermalign import cli
from thermalign.config import ConfigError, from_dict, load_config

TINY = {
    "seed": 3,
    "scenegen": {"n_per_species": 10},
    "pretrain": {"steps": 12, "batch_size": 4, "warmup_steps": 2, "n_source_per_species": 4, "holdout_per_species": 2},
    "align": {"max_steps": 20, "eval_interval": 10, "batch_size": 4, "peak_lr": 1e-3},
    "eval": {"max_new_tokens": 6},
}


def write_config(tmp_path: Path, **overrides) -> Path:
    cfg = {**TINY, "output_root": str(tmp_path / "runs"), **overrides}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def run_dir_from(out: str) -> Path:
    return Path(next(line for line in out.splitlines() if line.startswith("run: "))[5:])


# ---------------------------------------------------------------- config


def test_default_config_validates():
    cfg = load_config(None)
    assert cfg.align.peak_lr == 1e-4 and cfg.align.max_steps == 1000
    assert cfg.scenegen.n_per_species == 600 and tuple(cfg.dataset.ratios) == (0.8, 0.1, 0.1)


@pytest.mark.parametrize(
    "bad",
    [
        {"bogus": 1},
        {"align": {"max_steps": "many"}},
        {"dataset": {"ratios": [0.5, 0.5, 0.5]}},
        {"eval": {"backend": "carrier-pigeon"}},
        {"dataset": {"split_order": "shuffle"}},
        {"align": {"eval_interval": 900}},
    ],
)
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        from_dict(bad)


# ---------------------------------------------------------------- exit codes


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        cli.dispatch(["frobnicate"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        cli.dispatch(["align", "--max-steps", "lots"])
    assert info.value.code == 2


def test_missing_run_is_error(tmp_path, capsys):
    assert cli.dispatch(["align", "--config", str(write_config(tmp_path))]) == 1
    assert "needs --run" in capsys.readouterr().err
    assert cli.dispatch(["report", "--run", str(tmp_path / "nope")]) == 1


def test_bad_config_file_is_error(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("align: {max_steps: -3}\n")
    assert cli.dispatch(["gen-data", "--config", str(path)]) == 1
    assert "error" in capsys.readouterr().err


# ---------------------------------------------------------------- staged run


@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("staged")
    cfg = write_config(tmp)
    outputs = {}

    def run(*argv):
        import contextlib
        import io

        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = cli.dispatch(list(argv))
        assert code == 0, argv
        return buf.getvalue()

    outputs["gen"] = run("gen-data", "--config", str(cfg))
    run_dir = run_dir_from(outputs["gen"])
    base = ["--config", str(cfg), "--run", str(run_dir)]
    outputs["dataset"] = run("build-dataset", *base)
    outputs["pretrain"] = run("pretrain", *base)
    outputs["align"] = run("align", *base)
    outputs["align_short"] = run("align", *base, "--max-steps", "10", "--eval-interval", "5")
    outputs["eval"] = run("eval", *base)
    outputs["report"] = run("report", *base)
    return run_dir, cfg, outputs


def test_staged_layout(staged):
    run_dir, _, out = staged
    assert "30 scenes" in out["gen"]
    assert "train/val/test = 24/3/3" in out["dataset"]
    for rel in (
        "config.yaml",
        "data/manifest.json",
        "dataset/train.json",
        "pretrain/checkpoint/meta.json",
        "align/steps-20/selected.txt",
        "align/steps-10/selected.txt",
        "eval/steps-20/metrics.json",
        "eval/steps-10/responses.jsonl",
        "report/table1.csv",
        "report/table2.csv",
        "report/table3.csv",
        "report/loss-steps-20.svg",
        "report/loss-steps-10.svg",
    ):
        assert (run_dir / rel).exists(), rel


def test_report_tables(staged):
    run_dir, _, out = staged
    table2 = (run_dir / "report" / "table2.csv").read_text().splitlines()
    names = {line.split(",")[0] for line in table2[2:]}
    assert names == {"ToyVLM", "ToyVLM-Tuned", "ToyVLM-Tuned-10"}
    table1 = (run_dir / "report" / "table1.csv").read_text().splitlines()
    assert table1[0] == "Model,Trained parameters,Trained (%),Trained tensors,Frozen tensors,Trainable modules"
    assert '"24,832"' in table1[1] and table1[1].endswith("Projector/MLP")
    svg = (run_dir / "report" / "loss-steps-20.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg
    metrics = json.loads((run_dir / "eval" / "steps-20" / "metrics.json").read_text())
    assert set(metrics) == {f"{m}|{p}" for m in ("ToyVLM", "ToyVLM-Tuned") for p in ("closed_set", "open_set")}
    assert "macro-F1" in out["eval"]


def test_stage_outputs_never_overwritten(staged, capsys):
    run_dir, cfg, _ = staged
    assert cli.dispatch(["align", "--config", str(cfg), "--run", str(run_dir)]) == 1
    assert "already exists" in capsys.readouterr().err


def test_remote_eval_without_token(staged, monkeypatch, capsys, tmp_path):
    run_dir, _, _ = staged
    monkeypatch.delenv("THERMALIGN_API_KEY", raising=False)
    cfg = write_config(tmp_path, eval={"backend": "remote", "remote": {"model": "some-vlm"}})
    assert cli.dispatch(["eval", "--config", str(cfg), "--run", str(run_dir)]) == 1
    assert "THERMALIGN_API_KEY" in capsys.readouterr().err


def test_habitat_needs_remote(staged, capsys):
    run_dir, cfg, _ = staged
    assert cli.dispatch(["habitat", "--config", str(cfg), "--run", str(run_dir), "--backend", "local"]) == 1
    assert "remote" in capsys.readouterr().err


def test_seed_override_recorded(staged):
    run_dir, _, _ = staged
    echoed = yaml.safe_load((run_dir / "config.yaml").read_text())
    assert echoed["seed"] == 3 and echoed["scenegen"]["n_per_species"] == 10


# ---------------------------------------------------------------- all


def test_all_is_deterministic(tmp_path, capsys):
    cfg = write_config(tmp_path)
    runs = []
    for _ in range(2):
        assert cli.dispatch(["all", "--config", str(cfg)]) == 0
        runs.append(run_dir_from(capsys.readouterr().out))
    a, b = runs
    assert a != b
    assert (a / "eval/steps-20/metrics.json").read_bytes() == (b / "eval/steps-20/metrics.json").read_bytes()
    assert (a / "align/steps-20/selected.txt").read_text() == (b / "align/steps-20/selected.txt").read_text()
