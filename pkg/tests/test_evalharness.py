import csv
import json
import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from camforge.cam import alpha_stable
from camforge.evalharness import (HIST_BINS, AlphaStats, EmptyDatasetError, EvalRecord, RelPerfReport,
                                  alpha_statistics, evaluate_dataset, pairwise_reports, read_index,
                                  relative_performance, summarize_alphas, write_report, write_synthetic_dataset)
from camforge.nn import ScoreSpec, backward_to_layer, forward
from camforge.postproc import read_image

def records_from(pairs):
    return [EvalRecord(f"img_{i:04d}", 0, 1.0, {"a": a, "b": b}) for i, (a, b) in enumerate(pairs)]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory, tiny32):
    root = tmp_path_factory.mktemp("ds64")
    write_synthetic_dataset(root, 64, seed=0, model=tiny32)
    return root


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds4")
    write_synthetic_dataset(root, 4, seed=1)
    return root


def test_ratio_examples():
    assert relative_performance(records_from([(0.8, 0.4), (0.2, 0.4)]), "a", "b").relative_performance == pytest.approx(
        1.0, abs=1e-15)
    r = relative_performance(records_from([(0.8, 0.2)]), "a", "b")
    assert r.relative_performance == pytest.approx(4.0, rel=1e-15)
    assert r.sample_count == 1


def test_same_method_is_one():
    r = relative_performance(records_from([(0.3, 0.1), (0.7, 0.2)]), "a", "a")
    assert r.relative_performance == 1.0 and r.log_std == 0.0


def test_empty_records():
    with pytest.raises(EmptyDatasetError):
        relative_performance([], "a", "b")


def test_score_floor():
    r = relative_performance(records_from([(0.0, 1.0)]), "a", "b")
    assert r.log_mean == pytest.approx(math.log(1e-12))


@given(st.lists(st.tuples(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0)), min_size=1, max_size=20))
def test_relperf_identities(pairs):
    recs = records_from(pairs)
    ab, ba = relative_performance(recs, "a", "b"), relative_performance(recs, "b", "a")
    assert ab.relative_performance == pytest.approx(math.exp(ab.log_mean), rel=1e-12)
    assert ab.log_mean == pytest.approx(-ba.log_mean, abs=1e-12)
    assert ab.relative_performance * ba.relative_performance == pytest.approx(1.0, abs=1e-10)
    geo = math.prod(a / b for a, b in pairs) ** (1 / len(pairs))
    assert ab.relative_performance == pytest.approx(geo, rel=1e-9)


@given(st.lists(st.tuples(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0)), min_size=1, max_size=20), st.randoms())
def test_order_independent(pairs, rnd):
    recs = records_from(pairs)
    shuffled = recs[:]
    rnd.shuffle(shuffled)
    assert relative_performance(recs, "a", "b") == relative_performance(shuffled, "a", "b")


def test_population_std():
    r = relative_performance(records_from([(math.e, 1.0), (1.0, 1.0)]), "a", "b")
    assert r.log_std == pytest.approx(0.5)


# dataset evaluation ------------------------------------------------------------------------

def filter_oracle(model, root, threshold):
    """Count images whose labeled-class probability beats the threshold, one file at a time."""
    count = 0
    with open(root / "index.csv") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        img = read_image(root / row["filename"])
        scores = forward(model.astype(64), img).pre_softmax
        e = [math.exp(s - max(scores)) for s in scores]
        p = e[int(row["label"])] / sum(e)
        count += p > threshold
    return count


def test_index_written(dataset):
    rows = read_index(dataset)
    assert len(rows) == 64
    assert rows[0][0] == "img_0000.pgm" and rows[0][1] is not None


def test_confidence_one_is_empty(small_set, tiny32):
    with pytest.raises(EmptyDatasetError):
        evaluate_dataset(tiny32, small_set, ["gradcam", "gradcam-pp"], confidence=1.0)


def test_confidence_zero_keeps_all(small_set, tiny32):
    recs = evaluate_dataset(tiny32, small_set, ["gradcam", "gradcam-pp"], confidence=0.0)
    assert [r.image_id for r in recs] == [f"img_{i:04d}.pgm" for i in range(4)]
    for r in recs:
        assert 0 < r.outputs["gradcam"] <= 1 and 0 < r.base_score <= 1


@pytest.mark.parametrize("threshold", [0.5, 0.1, 0.105])
def test_filter_matches_oracle(dataset, tiny32, threshold):
    expected = filter_oracle(tiny32, dataset, threshold)
    if expected == 0:
        with pytest.raises(EmptyDatasetError):
            evaluate_dataset(tiny32, dataset, ["gradcam", "gradcam-plus"], confidence=threshold)
    else:
        assert len(evaluate_dataset(tiny32, dataset, ["gradcam", "gradcam-plus"], confidence=threshold)) == expected


def test_thread_count_does_not_change_output(small_set, tiny32):
    one = evaluate_dataset(tiny32, small_set, ["gradcam", "gradcam-pp"], confidence=0.0, threads=1)
    four = evaluate_dataset(tiny32, small_set, ["gradcam", "gradcam-pp"], confidence=0.0, threads=4)
    assert one == four


def test_unreadable_image_skipped(tmp_path, tiny32, caplog):
    write_synthetic_dataset(tmp_path, 3, seed=2)
    (tmp_path / "img_0001.pgm").write_bytes(b"P5 16 16 65535\n")
    recs = evaluate_dataset(tiny32, tmp_path, ["gradcam", "gradcam-plus"], confidence=0.0)
    assert [r.image_id for r in recs] == ["img_0000.pgm", "img_0002.pgm"]
    assert "skipping img_0001.pgm" in caplog.text


def test_constant_alpha_relperf_is_one(small_set, tiny32):
    methods = {"plus": {"method": "gradcam-plus"}, "pp-const": {"method": "gradcam-pp", "alpha_override": 0.5}}
    recs = evaluate_dataset(tiny32, small_set, methods, confidence=0.0)
    r = relative_performance(recs, "pp-const", "plus")
    assert r.relative_performance == pytest.approx(1.0, abs=1e-10)


# reports -------------------------------------------------------------------------------------

def three_pair_reports():
    recs = records_from([(0.5, 0.25), (0.125, 0.5)])
    for r, x in zip(recs, (0.3, 0.7)):
        r.outputs["c"] = x
    return pairwise_reports(recs, ["a", "b", "c"], confidence=0.5, score_mode="pre")


def test_three_pairs_csv(tmp_path):
    reports = three_pair_reports()
    write_report(reports, tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert len(rows) == 4
    assert rows[0][:4] == ["method_prime", "method", "relative_performance", "log_mean"]
    assert [(r[0], r[1]) for r in rows[1:]] == [("b", "a"), ("c", "a"), ("c", "b")]


def test_csv_round_trip_bit_exact(tmp_path):
    reports = three_pair_reports()
    write_report(reports, tmp_path / "r.csv")
    for rep, row in zip(reports, csv.DictReader(open(tmp_path / "r.csv"))):
        assert float(row["relative_performance"]) == rep.relative_performance
        assert float(row["log_mean"]) == rep.log_mean
        assert float(row["log_std"]) == rep.log_std
        assert int(row["sample_count"]) == rep.sample_count


def test_json_round_trip_bit_exact(tmp_path):
    reports = three_pair_reports()
    write_report(reports, tmp_path / "r.json")
    back = [RelPerfReport(**d) for d in json.loads((tmp_path / "r.json").read_text())["reports"]]
    assert back == reports


def test_alpha_stats_report_round_trip(tmp_path):
    stats = summarize_alphas(np.array([0.0, 0.5, 0.47, 0.52, 1e6]), np.array([0.1, -0.2, 0.3]))
    write_report(stats, tmp_path / "s.json")
    assert AlphaStats(**json.loads((tmp_path / "s.json").read_text())["alpha_stats"]) == stats
    write_report(stats, tmp_path / "s.csv")
    row = next(csv.DictReader(open(tmp_path / "s.csv")))
    assert float(row["median"]) == stats.median
    assert [int(row[f"bin_{i:02d}"]) for i in range(HIST_BINS)] == stats.histogram


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        write_report(three_pair_reports(), tmp_path / "r.xml")
    with pytest.raises(ValueError):
        write_report(three_pair_reports(), tmp_path / "r.json", fmt="yaml")


# alpha statistics -----------------------------------------------------------------------------

def test_alpha_stats_example():
    s = summarize_alphas(np.array([0.0, 0.5, 0.5, 1e6]))
    assert s.zero_count == 1 and s.nonzero_count == 3
    assert s.raw_max == 1e6
    assert s.median == 0.5
    assert sum(s.histogram) == 3


def test_all_zero_alphas():
    s = summarize_alphas(np.zeros(10))
    assert s.zero_count == 10 and s.empty
    assert s.q1 is None and s.median is None and sum(s.histogram) == 0


def test_histogram_edges():
    s = summarize_alphas(np.array([0.5, 1e9, -1e9]))
    assert s.histogram[HIST_BINS // 2] == 1
    assert s.histogram[0] == 1 and s.histogram[-1] == 1


@given(st.lists(st.floats(-5, 5).filter(lambda x: x != 0), min_size=1, max_size=60))
def test_quartiles_ordered(values):
    s = summarize_alphas(np.array(values))
    assert s.q1 <= s.median <= s.q3
    assert sum(s.histogram) == len(values)
    assert s.raw_min == min(values) and s.raw_max == max(values)


def percentile(sorted_vals, p):
    pos = (len(sorted_vals) - 1) * p
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(sorted_vals) - 1)
    return sorted_vals[lo] + (pos - lo) * (sorted_vals[hi] - sorted_vals[lo])


def naive_alpha_stats(model, root):
    vals = []
    for name, label in read_index(root):
        img = read_image(root / name)
        t = forward(model, img)
        c = label if label is not None else int(np.argmax(t.pre_softmax))
        g = backward_to_layer(model, t, ScoreSpec(c), 4)
        A = t.activations[4]
        for k in range(g.shape[0]):
            s = float(A[k].sum())
            for i in range(g.shape[1]):
                for j in range(g.shape[2]):
                    if g[k, i, j] != 0:
                        vals.append(1 / (2 + float(g[k, i, j]) * s))
    vals.sort()
    q1, q3 = percentile(vals, 0.25), percentile(vals, 0.75)
    fence = 1.5 * (q3 - q1)
    kept = [v for v in vals if q1 - fence <= v <= q3 + fence]
    return [percentile(kept, p) for p in (0.25, 0.5, 0.75)], len(vals)


def test_alpha_stats_match_naive(dataset, tiny64):
    stats = alpha_statistics(tiny64, dataset)
    quartiles, n = naive_alpha_stats(tiny64, dataset)
    assert stats.nonzero_count == n
    np.testing.assert_allclose([stats.q1, stats.median, stats.q3], quartiles, rtol=1e-9)


def test_alpha_stats_from_arrays(tiny32, image):
    s = alpha_statistics(tiny32, [image], class_index=3)
    t = forward(tiny32, image)
    f = alpha_stable(backward_to_layer(tiny32, t, ScoreSpec(3), 4), t.activations[4])
    assert s.zero_count == f.zero_gradient_count
    assert s.raw_max == pytest.approx(f.max_nonzero)


def test_near_half_band():
    rnd = random.Random(3)
    g = np.array([rnd.uniform(-1, 1) for _ in range(200)]).reshape(2, 10, 10)
    A = np.array([rnd.uniform(0, 1) for _ in range(200)]).reshape(2, 10, 10)
    sums = A.sum(axis=(1, 2), keepdims=True)
    g = g * 0.19 / np.max(np.abs(g * sums))
    f = alpha_stable(g, A)
    nz = f.values[g != 0]
    assert np.all((nz >= 1 / 2.2) & (nz <= 1 / 1.8))
