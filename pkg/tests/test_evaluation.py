import csv
import json
import math

import numpy as np
import pytest

from shapemetrics import evaluation
from shapemetrics.errors import ConfigError, DataError


def rec(gt, pred, lv=0.0, sid="s"):
    return evaluation.EvalRecord.from_prediction(sid, gt, pred, lv)


def random_records(rng, n):
    out = []
    for i in range(n):
        gt = float(rng.uniform(0.01, 5.0))
        pred = gt * float(rng.uniform(0.5, 1.5))
        lv = float(rng.normal())
        out.append(evaluation.EvalRecord.from_prediction(f"s{i:03d}", gt, pred, lv))
    return out


# --- records -----------------------------------------------------------------


def test_record_derived_fields():
    r = rec(2.0, 1.5, lv=-0.3, sid="abc")
    assert r.abs_err == pytest.approx(0.5, abs=0.0)
    assert r.rel_err_pct == pytest.approx(25.0, abs=0.0)
    assert r.confidence == pytest.approx(math.exp(0.3), rel=1e-15)
    assert r.sigma == pytest.approx(math.exp(-0.15), rel=1e-15)
    assert r.shape_id == "abc"


def test_record_rejects_nonpositive_gt():
    with pytest.raises(DataError):
        rec(0.0, 1.0)
    with pytest.raises(DataError):
        rec(-1.0, 1.0)


def test_record_rejects_nonfinite():
    with pytest.raises(DataError):
        rec(float("nan"), 1.0)
    with pytest.raises(DataError):
        rec(1.0, float("inf"))
    with pytest.raises(DataError):
        rec(1.0, 1.0, lv=float("nan"))


# --- summarize ---------------------------------------------------------------


@pytest.mark.parametrize(
    "gt,pred,expected_pct",
    [
        (0.03445, 0.02753, 20.09),
        (0.19560, 0.18763, 4.07),
        (0.07693, 0.07624, 0.89),
    ],
)
def test_single_record_relative_error_reference_values(gt, pred, expected_pct):
    s = evaluation.summarize([rec(gt, pred)])
    assert abs(s.mape_mean - expected_pct) <= 0.01
    assert abs(s.mape_median - expected_pct) <= 0.01
    assert s.n == 1


def test_perfect_predictions_are_all_zero():
    records = [rec(g, g, sid=f"s{g}") for g in (0.5, 1.0, 2.25)]
    s = evaluation.summarize(records)
    assert s.mae == 0.0 and s.rmse == 0.0
    assert s.mape_mean == 0.0 and s.mape_median == 0.0
    assert s.mape_iqr == (0.0, 0.0)


def test_summarize_quantiles_interpolate_linearly():
    # rel errors 0, 10, 20, 30 -> quartiles fall between order statistics
    records = [rec(1.0, 1.0 - p / 100.0, sid=str(p)) for p in (0, 10, 20, 30)]
    s = evaluation.summarize(records)
    assert s.mape_iqr[0] == pytest.approx(7.5, abs=1e-12)
    assert s.mape_median == pytest.approx(15.0, abs=1e-12)
    assert s.mape_iqr[1] == pytest.approx(22.5, abs=1e-12)
    assert s.mape_mean == pytest.approx(15.0, abs=1e-12)


def test_summarize_empty_rejected():
    with pytest.raises(DataError):
        evaluation.summarize([])


def test_summarize_permutation_invariant():
    rng = np.random.default_rng(7)
    records = random_records(rng, 31)
    a = evaluation.summarize(records)
    for _ in range(5):
        perm = rng.permutation(len(records))
        b = evaluation.summarize([records[i] for i in perm])
        assert b.mape_median == a.mape_median
        assert b.mape_iqr == a.mape_iqr
        assert b.mae == pytest.approx(a.mae, rel=1e-12)
        assert b.rmse == pytest.approx(a.rmse, rel=1e-12)
        assert b.mape_mean == pytest.approx(a.mape_mean, rel=1e-12)


def test_summary_order_properties():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        s = evaluation.summarize(random_records(rng, int(rng.integers(1, 40))))
        assert s.rmse >= s.mae - 1e-15
        assert s.mape_iqr[0] <= s.mape_median <= s.mape_iqr[1]
        assert s.mae >= 0.0 and s.mape_mean >= 0.0


def test_summary_to_dict_roundtrip_keys():
    s = evaluation.summarize([rec(1.0, 0.9)])
    d = s.to_dict()
    assert set(d) == {
        "mae",
        "rmse",
        "mape_mean",
        "mape_median",
        "mape_q25",
        "mape_q75",
        "n",
    }
    assert d["n"] == 1


# --- split histograms ---------------------------------------------------------


def test_split_histogram_partitions_by_gt():
    records = [
        rec(3.0, 2.7, sid="big1"),   # 10%
        rec(2.5, 2.5, sid="big2"),   # 0%
        rec(1.0, 0.8, sid="small1"),  # 20%
        rec(0.5, 0.45, sid="small2"),  # 10%
        rec(2.0, 1.9, sid="edge"),   # gt == threshold -> below
    ]
    above, below = evaluation.split_histogram(records, threshold=2.0, bins=4)
    assert above.n == 2 and below.n == 3
    assert int(above.counts.sum()) == 2
    assert int(below.counts.sum()) == 3
    assert np.array_equal(above.edges, below.edges)
    # shared bins span [0, max rel err] = [0, 20]
    assert above.edges[0] == 0.0
    assert above.edges[-1] == pytest.approx(20.0, abs=1e-12)
    assert above.mean == pytest.approx(5.0, abs=1e-12)
    assert below.median == pytest.approx(10.0, abs=1e-12)


def test_split_histogram_threshold_below_all():
    records = [rec(1.0, 0.9, sid=str(i)) for i in range(6)]
    above, below = evaluation.split_histogram(records, threshold=0.01, bins=3)
    assert above.n == 6
    assert below.n == 0
    assert int(below.counts.sum()) == 0
    assert math.isnan(below.mean) and math.isnan(below.median)


def test_split_histogram_count_conservation():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        records = random_records(rng, int(rng.integers(2, 60)))
        thr = float(rng.uniform(0.01, 5.0))
        above, below = evaluation.split_histogram(records, thr, bins=7)
        assert above.n + below.n == len(records)
        assert int(above.counts.sum()) + int(below.counts.sum()) == len(records)


def test_split_histogram_zero_errors_degenerate_range():
    records = [rec(1.0, 1.0, sid=str(i)) for i in range(4)]
    above, below = evaluation.split_histogram(records, 0.5, bins=2)
    assert int(above.counts.sum()) == 4
    assert above.edges[-1] > 0.0


def test_split_histogram_rejects_bad_bins():
    with pytest.raises(ConfigError):
        evaluation.split_histogram([rec(1.0, 0.9)], 2.0, bins=0)


# --- confidence / error association --------------------------------------------


def test_association_monotone_increasing_is_one():
    records = [
        rec(1.0, 1.0 + 0.01 * (i + 1), lv=0.1 * i, sid=str(i)) for i in range(8)
    ]
    rho = evaluation.confidence_error_association(records)
    assert rho == pytest.approx(1.0, abs=0.0)


def test_association_reversed_is_minus_one():
    records = [
        rec(1.0, 1.0 + 0.01 * (i + 1), lv=-0.1 * i, sid=str(i)) for i in range(8)
    ]
    rho = evaluation.confidence_error_association(records)
    assert rho == pytest.approx(-1.0, abs=0.0)


def test_association_constant_column_is_nan():
    same_sigma = [rec(1.0, 1.0 + 0.01 * (i + 1), lv=0.4, sid=str(i)) for i in range(6)]
    assert math.isnan(evaluation.confidence_error_association(same_sigma))
    same_err = [rec(1.0, 1.1, lv=0.1 * i, sid=str(i)) for i in range(6)]
    assert math.isnan(evaluation.confidence_error_association(same_err))


def test_association_needs_five_records():
    records = [rec(1.0, 1.1 + 0.01 * i, lv=0.1 * i, sid=str(i)) for i in range(4)]
    with pytest.raises(DataError):
        evaluation.confidence_error_association(records)


def test_association_independent_columns_near_zero():
    rng = np.random.default_rng(0)
    records = []
    for i in range(1000):
        gt = 1.0
        pred = 1.0 + float(rng.uniform(0.001, 1.0))
        lv = float(rng.normal())
        records.append(evaluation.EvalRecord.from_prediction(str(i), gt, pred, lv))
    rho = evaluation.confidence_error_association(records)
    assert abs(rho) < 0.1


# --- file formats ---------------------------------------------------------------


def test_records_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    records = random_records(rng, 17)
    path = tmp_path / "records.csv"
    evaluation.save_records(records, path)
    back = evaluation.load_records(path)
    assert back == records


def test_load_records_rejects_wrong_columns(tmp_path):
    path = tmp_path / "bad.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["shape_id", "gt"])
        w.writerow(["a", "1.0"])
    with pytest.raises(DataError):
        evaluation.load_records(path)


def test_save_summary_json(tmp_path):
    s = evaluation.summarize([rec(1.0, 0.8), rec(2.0, 2.1)])
    path = tmp_path / "report" / "summary.json"
    evaluation.save_summary(s, path)
    loaded = json.loads(path.read_text())
    assert loaded == s.to_dict()


def test_save_histograms_csv(tmp_path):
    records = [rec(1.0 + i, 1.0 + i * 0.9, sid=str(i)) for i in range(8)]
    above, below = evaluation.split_histogram(records, 4.0, bins=5)
    path = tmp_path / "hist.csv"
    evaluation.save_histograms(above, below, path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10  # 2 partitions x 5 bins
    assert {r["partition"] for r in rows} == {"above", "below"}
    total = sum(int(r["count"]) for r in rows)
    assert total == 8
