"""From rendered scenes to balanced, leakage-free ShareGPT splits."""
import json
import tempfile
from pathlib import Path

from thermalign import pipeline
from thermalign.config import from_dict
from thermalign.dataset import leakage_count, load, split_sizes

root = Path(tempfile.mkdtemp())
cfg = from_dict({"seed": 4, "output_root": str(root), "scenegen": {"n_per_species": 12}})
run = pipeline.new_run_dir(cfg)

# ### Rendering
#
# Each scene is a 64x64 thermal-like image with one species and a known count.
# The manifest records species and count for every image.

print(pipeline.gen_data(cfg, run))
manifest = json.loads((run / "data" / "manifest.json").read_text())
print(manifest[0])

# ### Balancing and splitting
#
# Minority species are topped up with quarter-turn rotations until every
# species matches the largest one. The split is stratified per species, so
# 12 deer become 9/1/2 (floor of 80% and 10%, the rest to test).

print(pipeline.build_dataset(cfg, run))
print("12 records alone:", split_sizes(12))

data = load(run / "dataset")
print("leakage across splits:", leakage_count(data.records) if data.records else 0)
print("per species:", data.manifest.per_species)

# ### Conversation records
#
# Every record is a user turn (image + prompt) and the structured answer.

print(json.dumps(data.splits["train"][0].to_json(), indent=1))
