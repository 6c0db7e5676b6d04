import csv
import io
import json
import random
from fractions import Fraction
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thermalign.backends import Backend
from thermalign.errors import AbortedRun, EmptyEvaluation, MalformedHabitat
from thermalign.evalkit import (
    CLOSED_SET,
    HABITAT,
    OPEN_SET,
    EvalItem,
    Prediction,
    enumeration_metrics,
    evaluate,
    format_report,
    format_text_table,
    load_results,
    parse_habitat,
    parse_species_count,
    recognition_metrics,
    render_prompt,
    write_evaluation,
)
from thermalign.scenegen import SPECIES

GOLDEN = Path(__file__).parent / "golden"


def ok(species, count=1):
    return Prediction(f"{species}; {count}", species, count, "ok")


BAD = Prediction("???")

# ---------------------------------------------------------------- prompts


@pytest.mark.parametrize("mode", [CLOSED_SET, OPEN_SET, HABITAT])
def test_prompt_golden_files(mode):
    assert render_prompt(mode).encode() == (GOLDEN / f"{mode}.txt").read_bytes()


def test_prompt_relationships():
    assert render_prompt("closed").endswith("Allowed species: deer, rhino, elephant.")
    assert render_prompt("closed") == render_prompt("open") + " Allowed species: deer, rhino, elephant."
    assert render_prompt(HABITAT).startswith("Describe the most important environmental context")
    with pytest.raises(ValueError):
        render_prompt("haiku")


# ---------------------------------------------------------------- parser


@pytest.mark.parametrize(
    "text,species,count",
    [
        ("Deer; 1", "deer", 1),
        ("Elephant; 2", "elephant", 2),
        ("elephant;2.", "elephant", 2),
        ("  RHINO ;  12  ", "rhino", 12),
        ("Deers; 4", "deer", 4),
        ("Rhinoceros; 3", "rhino", 3),
        ("Zebra; 5", "zebra", 5),
    ],
)
def test_parser_accepts(text, species, count):
    p = parse_species_count(text)
    assert (p.species, p.count, p.parse_status) == (species, count, "ok")
    assert p.raw_text == text


@pytest.mark.parametrize("text", ["I see some animals", "", "Deer 1", "Deer; -1", "Deer; one", "; 3", "Deer; 1; 2", None, 17])
def test_parser_rejects(text):
    p = parse_species_count(text)
    assert p.parse_status == "malformed" and p.species is None and p.count is None


@settings(max_examples=300, deadline=None)
@given(st.one_of(st.text(), st.binary()))
def test_parser_total(raw):
    p = parse_species_count(raw)
    assert p.parse_status in ("ok", "malformed")
    assert (p.parse_status == "ok") == (p.species is not None and p.count is not None)


# ---------------------------------------------------------------- metrics


def test_worked_confusion_example():
    truth = ["deer", "deer", "rhino", "elephant"]
    preds = [ok("deer"), ok("rhino"), ok("rhino"), ok("deer")]
    m = recognition_metrics(zip(truth, preds))
    assert (m["deer"].precision, m["deer"].recall, m["deer"].f1) == (0.5, 0.5, 0.5)
    assert (m["rhino"].precision, m["rhino"].recall) == (0.5, 1.0)
    assert m["rhino"].f1 == pytest.approx(2 / 3, abs=1e-12)
    assert (m["elephant"].precision, m["elephant"].recall, m["elephant"].f1) == (0.0, 0.0, 0.0)


def test_perfect_recognition_and_counts():
    items = [(s, c) for s in SPECIES for c in (1, 4, 9)]
    rec = recognition_metrics((s, ok(s, c)) for s, c in items)
    assert all((v.precision, v.recall, v.f1) == (1.0, 1.0, 1.0) for v in rec.values())
    enum = enumeration_metrics((s, c, ok(s, c)) for s, c in items)
    assert all((v.exact, v.within1, v.mae) == (1.0, 1.0, 0.0) for v in enum.values())


def test_enumeration_worked_example():
    items = [("deer", t, ok("deer", p)) for t, p in zip([3, 5, 2], [3, 4, 6])]
    d = enumeration_metrics(items)["deer"]
    assert d.exact == pytest.approx(1 / 3, abs=1e-12)
    assert d.within1 == pytest.approx(2 / 3, abs=1e-12)
    assert d.mae == pytest.approx(5 / 3, abs=1e-12)


def test_enumeration_malformed_policy():
    items = [("rhino", 3, ok("rhino", 3)), ("rhino", 4, BAD), ("elephant", 2, BAD)]
    m = enumeration_metrics(items)
    assert (m["rhino"].exact, m["rhino"].within1, m["rhino"].mae, m["rhino"].unparseable_rate) == (0.5, 0.5, 0.0, 0.5)
    assert m["elephant"].mae is None and m["elephant"].unparseable_rate == 1.0
    assert m["deer"].n == 0


def test_empty_inputs():
    with pytest.raises(EmptyEvaluation):
        recognition_metrics([])
    with pytest.raises(EmptyEvaluation):
        enumeration_metrics([])


def naive_recognition(truth, preds):
    """Confusion-matrix route with exact fractions."""
    labels = list(SPECIES) + ["<other>"]
    conf = {(a, b): 0 for a in labels for b in labels}
    for t, p in zip(truth, preds):
        guess = p.species if p.parse_status == "ok" and p.species in SPECIES else "<other>"
        conf[(t, guess)] += 1
    out = {}
    for s in SPECIES:
        tp = conf[(s, s)]
        col = sum(conf[(a, s)] for a in labels)
        row = sum(conf[(s, b)] for b in labels)
        prec = Fraction(tp, col) if col else Fraction(0)
        rec = Fraction(tp, row) if row else Fraction(0)
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
        out[s] = (float(prec), float(rec), float(f1))
    return out


def naive_enumeration(truth, counts, preds):
    out = {}
    for s in SPECIES:
        idx = [i for i in range(len(truth)) if truth[i] == s]
        if not idx:
            continue
        exact = within = 0
        errs = []
        for i in idx:
            p = preds[i]
            if p.parse_status != "ok":
                continue
            e = abs(p.count - counts[i])
            errs.append(e)
            exact += e == 0
            within += e <= 1
        mae = float(Fraction(sum(errs), len(errs))) if errs else None
        out[s] = (exact / len(idx), within / len(idx), mae, (len(idx) - len(errs)) / len(idx))
    return out


def random_instance(rng: random.Random):
    n = rng.randint(1, 50)
    truth = [rng.choice(SPECIES) for _ in range(n)]
    counts = [rng.randint(1, 12) for _ in range(n)]
    preds = []
    for _ in range(n):
        r = rng.random()
        if r < 0.15:
            preds.append(BAD)
        else:
            preds.append(ok(rng.choice(SPECIES + ("zebra",)), rng.randint(0, 14)))
    return truth, counts, preds


def test_metric_oracle_equivalence_1000_trials():
    rng = random.Random(1234)
    for _ in range(1000):
        truth, counts, preds = random_instance(rng)
        rec = recognition_metrics(zip(truth, preds))
        for s, (p, r, f) in naive_recognition(truth, preds).items():
            assert abs(rec[s].precision - p) <= 1e-12
            assert abs(rec[s].recall - r) <= 1e-12
            assert abs(rec[s].f1 - f) <= 1e-12
        enum = enumeration_metrics(zip(truth, counts, preds))
        for s, (e, w, mae, u) in naive_enumeration(truth, counts, preds).items():
            got = enum[s]
            assert abs(got.exact - e) <= 1e-12 and abs(got.within1 - w) <= 1e-12
            assert abs(got.unparseable_rate - u) <= 1e-12
            assert (got.mae is None) == (mae is None)
            if mae is not None:
                assert abs(got.mae - mae) <= 1e-12
            assert got.exact <= got.within1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_permutation_invariance(seed):
    rng = random.Random(seed)
    truth, counts, preds = random_instance(rng)
    order = list(range(len(truth)))
    rng.shuffle(order)
    a = enumeration_metrics(zip(truth, counts, preds))
    b = enumeration_metrics((truth[i], counts[i], preds[i]) for i in order)
    ra = recognition_metrics(zip(truth, preds))
    rb = recognition_metrics((truth[i], preds[i]) for i in order)
    for s in SPECIES:
        assert abs(ra[s].f1 - rb[s].f1) < 1e-12
        assert a[s].n == b[s].n
        assert abs(a[s].within1 - b[s].within1) < 1e-12
        for v in (a[s].exact, a[s].within1, a[s].unparseable_rate, ra[s].precision, ra[s].recall, ra[s].f1):
            assert 0 <= v <= 1


# ---------------------------------------------------------------- habitat


RAINFOREST = """Habitat/land cover: dense tropical rainforest with mixed canopy layers
Key landscape features (e.g., river, road, forest edge, grassland): a narrow river and a forest edge
Human presence/disturbance (if any): none visible
Brief habitat-context interpretation (1 sentence): Closed canopy near water offers cover for large mammals."""


def test_habitat_labeled():
    r = parse_habitat(RAINFOREST)
    assert r.habitat_land_cover == "dense tropical rainforest with mixed canopy layers"
    assert r.key_landscape_features == "a narrow river and a forest edge"
    assert r.human_presence == "none visible"
    assert r.interpretation.startswith("Closed canopy")


def test_habitat_blank_lines_and_bare():
    spaced = "\n\n".join(RAINFOREST.splitlines()) + "\n\n"
    assert parse_habitat(spaced) == parse_habitat(RAINFOREST)
    bare = parse_habitat("grassland\nroad\nfence line\nOpen savanna with light disturbance.")
    assert bare.key_landscape_features == "road"


@pytest.mark.parametrize("n", [0, 3, 5])
def test_habitat_wrong_line_count(n):
    with pytest.raises(MalformedHabitat) as info:
        parse_habitat("\n".join(f"line {i}" for i in range(n)))
    assert info.value.line_count == n


# ---------------------------------------------------------------- evaluation protocol


class ConstantBackend(Backend):
    max_parallel = 4

    def __init__(self, answer):
        self.answer = answer

    def infer(self, request):
        return self.answer


class OracleBackend(Backend):
    max_parallel = 4

    def __init__(self, items):
        self.truth = {it.image_id: it for it in items}

    def infer(self, request):
        it = self.truth[request.request_id]
        return f"{it.species.capitalize()}; {it.count}"


class FlakyBackend(Backend):
    def __init__(self, fail_every):
        self.fail_every = fail_every

    def infer(self, request):
        if int(request.request_id) % self.fail_every == 0:
            raise RuntimeError("boom")
        return "Deer; 1"


def make_items(n_per=(5, 3, 2)):
    items = []
    for s, n in zip(SPECIES, n_per):
        items += [EvalItem(f"{s}{i}", None, s, 1 + i) for i in range(n)]
    random.Random(0).shuffle(items)
    return items


def test_oracle_backend_scores_perfectly():
    items = make_items()
    res = evaluate(OracleBackend(items), items, "closed", parallelism=3)
    assert res.macro_f1 == 1.0 and res.macro_within1 == 1.0
    assert all(v.mae == 0 for v in res.enumeration.values())
    assert [r["image_id"] for r in res.responses] == sorted(it.image_id for it in items)


def test_constant_backend_closed_form():
    items = make_items()
    res = evaluate(ConstantBackend("Deer; 1"), items, "open")
    assert res.recognition["deer"].recall == 1.0
    assert res.recognition["deer"].precision == pytest.approx(5 / 10)
    assert res.recognition["rhino"].f1 == 0.0
    assert res.enumeration["deer"].exact == pytest.approx(1 / 5)


def test_backend_failures():
    items = [EvalItem(str(i), None, "deer", 1) for i in range(1, 11)]
    res = evaluate(FlakyBackend(5), items, "closed")
    assert res.failures == 2
    assert sum(r["parse_status"] == "malformed" for r in res.responses) == 2
    with pytest.raises(AbortedRun):
        evaluate(FlakyBackend(1), items, "closed")
    with pytest.raises(EmptyEvaluation):
        evaluate(ConstantBackend("Deer; 1"), [], "closed")


# ---------------------------------------------------------------- reporting


def test_report_layout_and_round_trip(tmp_path):
    items = make_items((4, 0, 2))
    results = {
        ("ToyVLM", "closed_set"): evaluate(ConstantBackend("Deer; 1"), items, "closed"),
        ("ToyVLM", "open_set"): evaluate(ConstantBackend("nonsense"), items, "open"),
    }
    tables = format_report(results)
    rows = list(csv.reader(io.StringIO(tables["table2"])))
    assert rows[0] == ["Model", "Prompt", "Precision", "", "", "Recall", "", "", "F1", "", ""]
    assert rows[1] == ["", ""] + ["Deer", "Rhino", "Elephant"] * 3
    assert rows[2][:2] == ["ToyVLM", "Closed-Set"]
    assert rows[2][2] == f"{4 / 6:.3f}"
    rows3 = list(csv.reader(io.StringIO(tables["table3"])))
    assert rows3[0][2::3] == ["Exact accuracy", "Within-1 accuracy", "MAE"]
    assert all(cell != "" for row in rows3[2:] for cell in row)
    assert rows3[2][3] == "0.000"  # rhino absent from the test set
    assert rows3[3][8] == "n/a"  # deer MAE with no parseable answer
    assert "Closed-Set" in format_text_table(tables["table2"])

    write_evaluation(results, tmp_path)
    assert {p.name for p in tmp_path.iterdir()} == {"metrics.json", "table2.csv", "table3.csv", "responses.jsonl"}
    audit = [json.loads(line) for line in (tmp_path / "responses.jsonl").read_text().splitlines()]
    assert len(audit) == 12 and {"image_id", "mode", "raw_text", "species", "count", "parse_status"} <= set(audit[0])
    again = load_results(tmp_path)
    assert format_report(again) == tables
