import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from holossl.evaluation import (
    EvalReport,
    HeadSettings,
    ReportEntry,
    balanced_accuracy,
    confusion,
    draw_seed,
    format_table1,
    shift_comparison,
    sweep_k,
    table1_csv,
)
from holossl.fewshot import LabelledEmbeddings


def brute_force_balanced_accuracy(true, pred, taxa):
    recalls = []
    for t in taxa:
        hits = total = 0
        for a, b in zip(true, pred):
            if a == t:
                total += 1
                hits += a == b
        recalls.append(hits / total)
    return sum(recalls) / len(recalls)


def test_metric_examples():
    taxa = ["a", "b", "c"]
    assert balanced_accuracy(["a", "b", "c"], ["a", "b", "c"], taxa) == 1.0
    true = ["a"] * 5 + ["b"] * 5
    pred = ["a"] * 4 + ["b"] + ["b"] * 3 + ["a"] * 2
    assert balanced_accuracy(true, pred, ["a", "b"]) == pytest.approx(0.7, abs=1e-15)
    assert balanced_accuracy(["a", "b", "c"] * 4, ["a"] * 12, taxa) == pytest.approx(1 / 3, abs=1e-15)


def test_metric_errors():
    with pytest.raises(ValueError, match="undefined"):
        balanced_accuracy(["a", "a"], ["a", "b"], ["a", "b"])
    with pytest.raises(ValueError, match="not in taxa"):
        confusion(["a", "z"], ["a", "a"], ["a", "b"])
    with pytest.raises(ValueError):
        confusion(["a"], ["a", "a"], ["a"])


def test_confusion_structure():
    cm = confusion(list("aabbc"), list("aabbc"), list("abc"))
    assert (cm.counts == np.diag([2, 2, 1])).all()
    cm = confusion(list("aabbcc"), list("abbcca"), list("abc"))
    assert cm.n_errors() == 3 == cm.counts.sum() - np.trace(cm.counts)
    assert cm.counts.sum(axis=1).tolist() == [2, 2, 2]


def test_matrix_metric_equals_brute_force_on_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        c = int(rng.integers(2, 8))
        taxa = [f"t{i}" for i in range(c)]
        n = int(rng.integers(c, 60))
        true = list(rng.permutation(np.concatenate([np.arange(c), rng.integers(0, c, n - c)])))
        pred = list(rng.integers(0, c, n))
        true = [taxa[i] for i in true]
        pred = [taxa[i] for i in pred]
        assert abs(confusion(true, pred, taxa).balanced_accuracy() - brute_force_balanced_accuracy(true, pred, taxa)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(data=st.data())
def test_metric_properties(data):
    c = data.draw(st.integers(2, 5))
    per = data.draw(st.integers(1, 6))
    taxa = [str(i) for i in range(c)]
    true = [str(i) for i in range(c) for _ in range(per)]
    pred = [str(data.draw(st.integers(0, c - 1))) for _ in true]
    ba = balanced_accuracy(true, pred, taxa)
    assert 0.0 <= ba <= 1.0
    perm = np.random.default_rng(data.draw(st.integers(0, 999))).permutation(len(true))
    assert ba == pytest.approx(balanced_accuracy([true[i] for i in perm], [pred[i] for i in perm], taxa), abs=1e-15)
    # uniform true-label distribution: balanced accuracy equals plain accuracy
    assert ba == pytest.approx(np.mean([a == b for a, b in zip(true, pred)]), abs=1e-12)


# -- sweep ---------------------------------------------------------------------


def toy_sets(seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(3, 5)) * 2
    sets = {}
    for source, noise in (("generic", 1.5), ("ssl_refined", 0.8)):
        for inst, shift in (("P5", 0.0), ("P4", 0.7)):
            for split, n in (("train", 12), ("test", 6)):
                y = np.repeat(np.arange(3), n)
                x = centers[y] + noise * rng.normal(size=(len(y), 5)) + shift
                sets[(source, inst, split)] = LabelledEmbeddings(
                    [f"{inst}/{split}/{i}" for i in range(len(y))], x, [f"taxon{c:02d}" for c in y]
                )
    return sets


def test_sweep_count_contract():
    report = sweep_k(toy_sets(), ks=[1], repeats=1, master_seed=3)
    assert len(report.entries) == 2 * 2 * 2
    assert all(len(e.draws) == 1 and e.stdev == 0.0 for e in report.entries)
    report = sweep_k(toy_sets(), ks=[1, 5], repeats=4, heads=["prototype"], feature_sources=["generic"])
    assert len(report.entries) == 4 and all(len(e.draws) == 4 for e in report.entries)


def test_sweep_deterministic_and_stats_consistent():
    a = sweep_k(toy_sets(), ks=[1, 3], repeats=5, master_seed=7)
    b = sweep_k(toy_sets(), ks=[1, 3], repeats=5, master_seed=7)
    assert a.to_json() == b.to_json()
    for e in a.entries:
        assert all(0.0 <= d <= 1.0 for d in e.draws)
        assert abs(e.mean - statistics.fmean(e.draws)) <= 1e-12
        assert abs(e.stdev - statistics.stdev(e.draws)) <= 1e-12
    c = sweep_k(toy_sets(), ks=[1, 3], repeats=5, master_seed=8)
    assert a.to_json() != c.to_json()


def test_adding_configuration_keeps_existing_draws():
    small = sweep_k(toy_sets(), ks=[3], repeats=3, heads=["linear"], feature_sources=["generic"], master_seed=1)
    big = sweep_k(toy_sets(), ks=[1, 3], repeats=3, master_seed=1, settings=HeadSettings())
    assert small.get("generic", "linear", 3, "P5", "P4").draws == big.get("generic", "linear", 3, "P5", "P4").draws


def test_draw_seed_scheme():
    assert draw_seed(0, 1, 0) == draw_seed(0, 1, 0)
    assert len({draw_seed(m, k, r) for m in range(3) for k in (1, 5) for r in range(10)}) == 60


def test_sweep_missing_split():
    sets = toy_sets()
    del sets[("generic", "P4", "test")]
    with pytest.raises(KeyError, match="P4"):
        sweep_k(sets, ks=[1], repeats=1, feature_sources=["generic"])


def test_report_json_roundtrip():
    report = sweep_k(toy_sets(), ks=[1, 2], repeats=3)
    back = EvalReport.from_json(report.to_json())
    assert back.to_json() == report.to_json()
    assert back.fig2_csv() == report.fig2_csv()


def test_fig2_schema():
    report = sweep_k(toy_sets(), ks=[1, 2], repeats=2)
    rows = report.fig2_csv().splitlines()
    assert rows[0] == "feature_source,head,k,train_instrument,test_instrument,mean,stdev,lo,hi"
    assert len(rows) - 1 == 2 * 2 * 2 * 2
    for line in rows[1:]:
        f = line.split(",")
        mean, stdev, lo, hi = map(float, f[5:])
        assert 0 <= lo <= mean <= hi <= 1


def test_report_entry_validation():
    with pytest.raises(ValueError):
        ReportEntry("generic", "linear", 1, "P5", "P5", [])
    with pytest.raises(ValueError):
        ReportEntry("generic", "linear", 1, "P5", "P5", [1.2])


# -- shift table ---------------------------------------------------------------


def fixture_report(values):
    entries = []
    for source, (same, shifted) in values.items():
        entries.append(ReportEntry(source, "linear", 25, "P5", "P5", [same]))
        entries.append(ReportEntry(source, "linear", 25, "P5", "P4", [shifted]))
    return EvalReport(entries, 0)


def test_table1_layout_with_reference_values():
    rows = shift_comparison(fixture_report({"generic": (0.899, 0.755), "ssl_refined": (0.904, 0.790)}))
    assert [r.feature_source for r in rows] == ["generic", "ssl_refined"]
    text = format_table1(rows).splitlines()
    assert text[0].split() == ["features", "same", "shifted", "drop"]
    assert text[1].split() == ["generic", "89.9%", "75.5%", "14.4%"]
    assert text[2].split() == ["ssl_refined", "90.4%", "79.0%", "11.4%"]
    assert rows[0].drop > rows[1].drop
    csv_lines = table1_csv(rows).splitlines()
    assert csv_lines[0] == "feature_source,head,k,same_instrument,shifted_instrument,same_mean,shifted_mean,drop"
    assert csv_lines[1].startswith("generic,linear,25,P5,P4,0.899,0.755,")


def test_identical_inputs_zero_drop():
    rows = shift_comparison(fixture_report({"generic": (0.8, 0.8)}))
    assert rows[0].drop == 0.0


def test_shift_comparison_missing_pair():
    report = EvalReport([ReportEntry("generic", "linear", 1, "P5", "P5", [0.5])], 0)
    with pytest.raises(ValueError, match="pair"):
        shift_comparison(report)
    with pytest.raises(ValueError):
        shift_comparison(report, head="prototype")
