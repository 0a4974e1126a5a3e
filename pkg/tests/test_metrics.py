import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdslab import metrics as M

import oracles as O


def test_top1_examples():
    labels = np.array([0, 2, 1, 2])
    assert M.top1(np.eye(3)[labels], labels) == 1.0
    assert M.top1(np.eye(3)[(labels + 1) % 3], labels) == 0.0
    assert M.top1(np.zeros((2, 3)), [0, 1]) == 0.5  # ties go to class 0
    with pytest.raises(ValueError):
        M.top1(np.zeros((0, 3)), [])


def test_top1_matches_argmax_count():
    rng = np.random.default_rng(0)
    logits, labels = rng.normal(size=(100, 10)), rng.integers(0, 10, size=100)
    hits = 0
    for row, y in zip(logits, labels):
        best = max(range(10), key=lambda c: (row[c], -c))
        hits += best == y
    assert M.top1(logits, labels) == hits / 100


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_top1_invariant_under_monotone_maps(seed):
    rng = np.random.default_rng(seed)
    logits, labels = rng.normal(size=(20, 5)), rng.integers(0, 5, size=20)
    a = M.top1(logits, labels)
    assert M.top1(np.exp(logits) * 3 + 1, labels) == a
    assert M.top1(logits ** 3, labels) == a


def test_ece_examples():
    probs = np.eye(4)[[0, 1, 2]]
    assert M.ece(probs, [0, 1, 2]).ece == 0.0
    two = np.array([[0.8, 0.2], [0.8, 0.2]])
    assert M.ece(two, [0, 1]).ece == pytest.approx(0.3, abs=1e-12)


def test_ece_matches_binning_oracle():
    rng = np.random.default_rng(1)
    for trial in range(20):
        logits = rng.normal(size=(200, 6)) * rng.uniform(0.5, 4)
        probs, labels = M.softmax(logits), rng.integers(0, 6, size=200)
        want, counts = O.ece(probs, labels, 15)
        got = M.ece(probs, labels, 15)
        assert got.ece == pytest.approx(want, abs=1e-9)
        assert got.counts.tolist() == counts


def test_bin_edges_are_right_closed():
    probs = np.array([[0.2, 0.8], [0.5, 0.5], [1.0, 0.0]])
    r = M.ece(probs, [1, 0, 0], 10)
    assert r.counts[7] == 1  # 0.8 lies in (0.7, 0.8]
    assert r.counts[4] == 1  # 0.5 lies in (0.4, 0.5]
    assert r.counts[9] == 1


@given(st.integers(0, 2**31 - 1), st.integers(1, 30))
@settings(max_examples=40, deadline=None)
def test_ece_report_invariants(seed, bins):
    rng = np.random.default_rng(seed)
    probs = M.softmax(rng.normal(size=(50, 4)) * 3)
    r = M.ece(probs, rng.integers(0, 4, size=50), bins)
    assert r.counts.sum() == 50 and 0 <= r.ece <= 1
    nz = r.counts > 0
    assert r.ece == pytest.approx(float(np.sum(r.counts[nz] / 50 * np.abs(r.confidence[nz] - r.accuracy[nz]))))


def test_perfectly_calibrated_set_has_small_ece():
    rng = np.random.default_rng(2)
    per_bin, bins = 2000, 10
    probs, labels = [], []
    for b in range(5, bins):
        c = (b + 0.5) / bins
        correct = rng.permutation(np.arange(per_bin) < round(c * per_bin))
        for ok in correct:
            probs.append([c, 1 - c])
            labels.append(0 if ok else 1)
    assert M.ece(np.array(probs), labels, bins).ece < 1 / (2 * per_bin)


def test_ece_rejects_unnormalized_rows():
    with pytest.raises(ValueError):
        M.ece(np.array([[0.5, 0.6]]), [0])
    with pytest.raises(ValueError):
        M.ece(np.array([[1.0, 0.0]]), [0], n_bins=0)


def test_calibration_csv_round_trip():
    rng = np.random.default_rng(3)
    r = M.ece(M.softmax(rng.normal(size=(40, 3))), rng.integers(0, 3, size=40))
    back = M.CalibrationReport.from_csv(r.to_csv())
    assert back.n_bins == 15 and back.samples == 40
    np.testing.assert_array_equal(back.counts, r.counts)
    assert back.ece == pytest.approx(r.ece, abs=1e-6)
    assert r.to_csv().splitlines()[0] == "bin_lo,bin_hi,count,conf,acc"


def _run(regime, top1, ce, ece, dataset="d"):
    return {"regime": regime, "dataset": dataset, "top1": top1, "train_ce": ce, "ece": ece}


def test_curve_summary_single_and_identical_runs():
    t = M.curve_summary([_run("cds", 0.7, 0.5, 0.05)])
    assert t[0]["top1_median"] == 0.7 and t[0]["runs"] == 1
    t = M.curve_summary([_run("cds", 0.7, 0.5, 0.05)] * 2)
    assert all(t[0][f"{c}_std"] == 0 for c in M.SUMMARY_COLUMNS)


def test_median_deltas_match_hand_computation():
    base = [0.61, 0.64, 0.60]
    cds = [0.66, 0.62, 0.65]
    runs = [_run("baseline", v, 1.0, 0.1) for v in base] + [_run("cds", v, 1.2, 0.08) for v in cds]
    t = {r["regime"]: r for r in M.add_deltas(M.curve_summary(runs), "baseline")}
    assert t["cds"]["top1_median_delta"] == pytest.approx(O.median(cds) - O.median(base), abs=1e-12)
    assert t["baseline"]["top1_median_delta"] == 0


def test_curve_summary_rejects_mixed_datasets():
    with pytest.raises(ValueError):
        M.curve_summary([_run("a", 1, 1, 0, "x"), _run("b", 1, 1, 0, "y")])


def test_mean_pairwise_cosine():
    assert M.mean_pairwise_cosine(np.ones((4, 3))) == pytest.approx(1.0)
    assert M.mean_pairwise_cosine(np.eye(3)) == pytest.approx(0.0)
