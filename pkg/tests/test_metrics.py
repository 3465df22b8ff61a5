import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from mosfuse import metrics
from mosfuse.dataset import from_records
from mosfuse.errors import UndefinedCorrelation

from . import oracles


def _vectors(min_size=2, max_size=30):
    values = st.integers(-5, 5).map(float) | st.floats(-100, 100, allow_nan=False)
    return st.integers(min_size, max_size).flatmap(
        lambda n: st.tuples(st.lists(values, min_size=n, max_size=n),
                            st.lists(values, min_size=n, max_size=n)))


def _nonconstant(x):
    return len(set(x)) > 1


# -- examples ----------------------------------------------------------------

def test_lcc_examples():
    x = np.arange(10.0)
    assert metrics.lcc(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-15)
    assert metrics.lcc(x, -x) == pytest.approx(-1.0, abs=1e-15)
    assert metrics.lcc([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)


def test_srcc_examples():
    x = np.array([0.3, -1.0, 2.0, 5.5, 4.0])
    assert metrics.srcc(np.exp(x), x) == 1.0
    assert metrics.srcc(x, -x) == -1.0
    expected = oracles.pearson([1, 2.5, 2.5, 4], [1, 3, 2, 4])
    assert metrics.srcc([1, 2, 2, 4], [1, 3, 2, 4]) == pytest.approx(expected, abs=1e-12)


def test_ktau_examples():
    assert metrics.ktau([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
    assert metrics.ktau([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3, abs=1e-15)
    assert metrics.ktau([1, 1, 2], [1, 2, 3]) == pytest.approx(
        oracles.kendall_tau_b([1, 1, 2], [1, 2, 3]), abs=1e-15)
    # C=2, D=0, Tx=1, Ty=0
    assert metrics.ktau([1, 1, 2], [1, 2, 3]) == pytest.approx(2 / math.sqrt(3 * 2), abs=1e-15)


def test_rankdata_averages_ties():
    np.testing.assert_array_equal(metrics.rankdata([10, 20, 20, 5]), [2, 3.5, 3.5, 1])


@pytest.mark.parametrize("fn", [metrics.lcc, metrics.srcc, metrics.ktau])
def test_constant_input_is_undefined(fn):
    with pytest.raises(UndefinedCorrelation, match="undefined correlation"):
        fn([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(UndefinedCorrelation):
        fn([1.0, 2.0, 3.0], [4.0, 4.0, 4.0])


@pytest.mark.parametrize("fn", [metrics.mse, metrics.lcc, metrics.srcc, metrics.ktau])
def test_length_mismatch(fn):
    with pytest.raises(ValueError, match="length mismatch"):
        fn([1.0, 2.0, 3.0], [1.0, 2.0])


def test_correlations_need_two_points():
    with pytest.raises(ValueError):
        metrics.lcc([1.0], [2.0])


# -- oracle agreement --------------------------------------------------------

def test_random_pairs_match_oracles():
    rng = np.random.default_rng(1234)
    checked = 0
    while checked < 200:
        n = int(rng.integers(2, 40))
        x = rng.integers(0, 6, n).astype(float) if rng.random() < 0.5 else rng.normal(size=n)
        y = rng.integers(0, 6, n).astype(float) if rng.random() < 0.5 else rng.normal(size=n)
        if not (_nonconstant(x) and _nonconstant(y)):
            continue
        xs, ys = x.tolist(), y.tolist()
        assert metrics.mse(x, y) == pytest.approx(oracles.mse(xs, ys), abs=1e-9)
        assert metrics.lcc(x, y) == pytest.approx(oracles.pearson(xs, ys), abs=1e-9)
        assert metrics.srcc(x, y) == pytest.approx(oracles.spearman(xs, ys), abs=1e-9)
        assert metrics.ktau(x, y) == pytest.approx(oracles.kendall_tau_b(xs, ys), abs=1e-9)
        checked += 1


# -- properties --------------------------------------------------------------

@settings(max_examples=150, deadline=None)
@given(_vectors())
def test_srcc_is_pearson_of_ranks(xy):
    x, y = map(np.array, xy)
    assume(_nonconstant(x) and _nonconstant(y))
    assert metrics.srcc(x, y) == metrics.lcc(metrics.rankdata(x), metrics.rankdata(y))


@settings(max_examples=150, deadline=None)
@given(_vectors(), st.floats(0.1, 10), st.floats(-10, 10))
def test_affine_and_monotone_invariance(xy, scale, shift):
    x, y = map(np.array, xy)
    assume(_nonconstant(x) and _nonconstant(y))
    # a shift can swamp a tiny spread in floating point
    assume(np.ptp(x) > 1e-6 * max(1.0, np.abs(x).max()))
    assert metrics.lcc(scale * x + shift, y) == pytest.approx(metrics.lcc(x, y), abs=1e-9)
    # strictly monotone transform that keeps exact ties and order
    t = np.arctan(x) * 3 + x ** 3
    assert abs(metrics.srcc(t, y) - metrics.srcc(x, y)) <= 1e-12
    assert abs(metrics.ktau(t, y) - metrics.ktau(x, y)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=25, unique=True),
       st.randoms(use_true_random=False))
def test_ktau_without_ties(xs, rnd):
    ys = list(range(len(xs)))
    rnd.shuffle(ys)
    n = len(xs)
    c = sum((xs[i] - xs[j]) * (ys[i] - ys[j]) > 0 for i in range(n) for j in range(i + 1, n))
    d = n * (n - 1) // 2 - c
    assert metrics.ktau(xs, ys) == pytest.approx((c - d) / (n * (n - 1) / 2), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(_vectors(min_size=1))
def test_mse_properties(xy):
    x, y = map(np.array, xy)
    assert metrics.mse(x, x) == 0.0
    assert metrics.mse(x, y) == metrics.mse(y, x)


@settings(max_examples=100, deadline=None)
@given(_vectors())
def test_correlations_bounded(xy):
    x, y = map(np.array, xy)
    assume(_nonconstant(x) and _nonconstant(y))
    for fn in (metrics.lcc, metrics.srcc, metrics.ktau):
        assert -1.0 <= fn(x, y) <= 1.0


# -- system level and reports ------------------------------------------------

def _dataset(scores_by_utt):
    rows = []
    for uid, (sid, scores) in scores_by_utt.items():
        for k, s in enumerate(scores):
            rows.append((uid, sid, f"l{k}", s, f"{uid}.wav"))
    return from_records(rows)


def test_system_level_hand_means():
    d = _dataset({"a1": ("A", [3]), "a2": ("A", [5]), "b1": ("B", [1, 2])})
    ids, sp, stru = metrics.system_level({"a1": 2.0, "a2": 4.0, "b1": 1.0}, d)
    assert ids == ["A", "B"]
    np.testing.assert_array_equal(sp, [3.0, 1.0])
    np.testing.assert_array_equal(stru, [4.0, 1.5])


def test_system_level_trivial_cases():
    one = _dataset({"u1": ("S", [2]), "u2": ("S", [4])})
    ids, sp, stru = metrics.system_level([1.0, 2.0], one)
    assert ids == ["S"] and sp.tolist() == [1.5] and stru.tolist() == [3.0]
    two = _dataset({"u1": ("S1", [2]), "u2": ("S2", [4])})
    _, sp, stru = metrics.system_level([1.0, 2.0], two)
    assert sp.tolist() == [1.0, 2.0] and stru.tolist() == [2.0, 4.0]


def test_system_level_missing_prediction():
    d = _dataset({"u1": ("S", [2]), "u2": ("S", [4])})
    with pytest.raises(ValueError, match="u2"):
        metrics.system_level({"u1": 1.0}, d)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("ABC"), st.lists(st.integers(1, 5), min_size=1, max_size=4)),
                min_size=1, max_size=12))
def test_system_level_perfect_predictions(utts):
    d = _dataset({f"u{i}": u for i, u in enumerate(utts)})
    _, sp, stru = metrics.system_level(d.labels(), d)
    np.testing.assert_array_equal(sp, stru)


def test_evaluate_perfect_predictions():
    d = _dataset({f"u{i}": (f"S{i % 3}", [1 + i % 5, 1 + (i * 2) % 5]) for i in range(12)})
    rep = metrics.evaluate(dict(zip(d.utterance_ids, d.labels())), d)
    for level in (rep.utterance, rep.system):
        assert level["mse"] == 0.0
        for m in ("lcc", "srcc", "ktau"):
            assert level[m] == pytest.approx(1.0, abs=1e-12)
    assert rep.n_utterances == 12 and rep.n_systems == 3


def test_evaluate_constant_predictions_reports_undefined():
    d = _dataset({f"u{i}": (f"S{i % 2}", [1 + i % 5]) for i in range(6)})
    rep = metrics.evaluate(np.full(6, 3.0), d)
    out = rep.to_dict()
    assert math.isfinite(out["utterance"]["mse"])
    for level in ("utterance", "system"):
        for m in ("lcc", "srcc", "ktau"):
            assert out[level][m] == "undefined"
    assert json.loads(rep.to_json()) == out
    assert "undefined" in rep.to_text()
    assert out["meta"]["ktau_variant"] == "tau-b"


def test_evaluate_random_instance_against_oracles():
    rng = np.random.default_rng(7)
    d = _dataset({f"u{i:02d}": (f"S{i % 4}", rng.integers(1, 6, 3).tolist()) for i in range(24)})
    pred = rng.normal(3, 1, len(d))
    rep = metrics.evaluate(pred, d)
    y = d.labels().tolist()
    p = pred.tolist()
    assert rep.utterance["mse"] == pytest.approx(oracles.mse(p, y), abs=1e-12)
    assert rep.utterance["lcc"] == pytest.approx(oracles.pearson(p, y), abs=1e-12)
    assert rep.utterance["srcc"] == pytest.approx(oracles.spearman(p, y), abs=1e-12)
    assert rep.utterance["ktau"] == pytest.approx(oracles.kendall_tau_b(p, y), abs=1e-12)
    _, sp, stru = metrics.system_level(pred, d)
    assert rep.system["srcc"] == pytest.approx(oracles.spearman(sp.tolist(), stru.tolist()), abs=1e-12)


def test_text_report_layout():
    d = _dataset({f"u{i}": (f"S{i % 2}", [1 + i % 5]) for i in range(6)})
    text = metrics.evaluate(d.labels(), d).to_text()
    header, utt, sys_, foot = text.splitlines()
    assert header.split() == ["MSE", "LCC", "SRCC", "KTAU"]
    assert utt.startswith("utterance") and sys_.startswith("system")
    assert foot == "N=6 utterances, 2 systems"


def test_underflowing_spread_is_undefined():
    with pytest.raises(UndefinedCorrelation):
        metrics.lcc([0.0, 0.0, -5e-245], [1.0, 2.0, 3.0])
