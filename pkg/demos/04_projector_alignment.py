"""Projector-only alignment on a small run, with the freeze checked end to end."""
import tempfile
from pathlib import Path

from thermalign import pipeline
from thermalign.checkpoint import load_checkpoint
from thermalign.config import from_dict
from thermalign.model import parameter_partition
from thermalign.train import LossCurve, TrainConfig, lr_at, smooth

root = Path(tempfile.mkdtemp())
cfg = from_dict(
    {
        "seed": 2,
        "output_root": str(root),
        "scenegen": {"n_per_species": 20},
        "pretrain": {"steps": 60, "batch_size": 8, "warmup_steps": 6, "n_source_per_species": 20, "holdout_per_species": 4},
        "align": {"max_steps": 60, "eval_interval": 10, "batch_size": 8, "peak_lr": 1e-3},
    }
)
run = pipeline.new_run_dir(cfg)
print(pipeline.gen_data(cfg, run))
print(pipeline.build_dataset(cfg, run))

# ### Stand-in for RGB pretraining
#
# The encoder and language model learn to describe RGB scenes. This is a tiny
# budget; the default configuration trains for several thousand steps.

print(pipeline.pretrain(cfg, run))
pre = load_checkpoint(run / "pretrain" / "checkpoint")
pre.freeze_backbones()
print(parameter_partition(pre).row())

# ### Schedule
#
# Linear warmup over the first 3% of steps, then cosine decay to zero.

paper = TrainConfig()
print([f"{lr_at(s, paper):.2e}" for s in (0, 15, 30, 515, 1000)])

# ### Alignment
#
# Only the projector receives gradients. Every evaluation checks the backbone
# digests; the selected checkpoint is the validation-loss minimum.

print(pipeline.align(cfg, run))
tag = f"steps-{cfg.align.max_steps}"
selected = int((run / "align" / tag / "selected.txt").read_text())
tuned = load_checkpoint(run / "align" / tag / "checkpoints" / f"step-{selected}")
print("backbones unchanged:", tuned.backbone_digests() == pre.backbone_digests())

values = LossCurve.read_csv(run / "align" / tag / "curves" / "val.csv", "val").values
print("val loss:", [f"{v:.2f}" for v in values])
print("smoothed:", [f"{v:.2f}" for v in smooth(values)])

# ### Scoring
#
# The untrained-projector baseline and the tuned model answer the same test
# prompts; the report stage writes the tables and loss plots. At this budget
# both are near chance; the acceptance suite runs the full-size version.

print(pipeline.run_eval(cfg, run))
print(pipeline.report(run))
