"""Parsing "Species; Count" answers and scoring them."""
from thermalign.evalkit import (
    Prediction,
    enumeration_metrics,
    format_report,
    format_text_table,
    parse_species_count,
    recognition_metrics,
    render_prompt,
)

# ### Prompts
#
# Both prompts ask for the same structured answer; the closed-set one lists the
# admissible species.

print(render_prompt("closed"))
print(render_prompt("open"))

# ### Lenient parsing
#
# The parser is total: anything it cannot read becomes a malformed prediction,
# which later counts as a miss rather than crashing the run.

for text in ["Deer; 1", "elephant;2.", "Rhinoceros; 3", "Deers; 4", "I see some animals"]:
    p = parse_species_count(text)
    print(f"{text!r:>22} -> {p.parse_status:<9} {p.species} {p.count}")

# ### Recognition
#
# Four images, two of them deer. The model calls one deer a rhino and the
# elephant a deer, so elephant gets no true positive at all.


def answer(species, count=1):
    return Prediction(f"{species}; {count}", species, count, "ok")


truth = ["deer", "deer", "rhino", "elephant"]
preds = [answer("deer"), answer("rhino"), answer("rhino"), answer("deer")]
for species, m in recognition_metrics(zip(truth, preds)).items():
    print(f"{species:>9}: P={m.precision:.3f} R={m.recall:.3f} F1={m.f1:.3f}")

# ### Enumeration
#
# Counting metrics are grouped by the true species. Within-1 forgives an
# off-by-one, MAE averages the absolute error over parseable answers.

items = [("deer", 3, answer("deer", 3)), ("deer", 5, answer("deer", 4)), ("deer", 2, answer("deer", 6))]
d = enumeration_metrics(items)["deer"]
print(f"deer: exact={d.exact:.3f} within-1={d.within1:.3f} MAE={d.mae:.3f}")

# ### Report tables
#
# Results for each (model, prompt) pair render into the two-row-header layout
# used for recognition and enumeration tables.

from thermalign.backends import Backend  # noqa: E402
from thermalign.evalkit import EvalItem, evaluate  # noqa: E402


class AlwaysDeer(Backend):
    def infer(self, request):
        return "Deer; 1"


test_set = [EvalItem(f"img{i}", None, s, 1 + i % 3) for i, s in enumerate(["deer", "rhino", "elephant"] * 4)]
result = evaluate(AlwaysDeer(), test_set, "closed")
print(format_text_table(format_report({("AlwaysDeer", "closed_set"): result})["table2"]))
