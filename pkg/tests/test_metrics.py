"""Uplift metrics against hand-computed values and brute-force oracles.

The 8-sample fixture's curve was worked out by hand; the factorial envelope
test then checks the optimum-ordering convention against every one of the
8! = 40320 orderings.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import GOLDEN
from uplift_mtd.errors import SchemaError, SizeError
from uplift_mtd.metrics import (
    Curve,
    Scored,
    ScoredSample,
    auuc,
    average_uplift,
    curve_to_csv,
    curves_to_svg,
    evaluate_scores,
    optimum_order,
    qini_curve,
    qini_score,
    uplift_at_k,
    uplift_curve,
)

# (score, treated, outcome); arm outcome rates are 0.5/0.5 so the overall
# incremental gain is zero and both curves return to the axis at fraction 1.
ROWS8 = [
    (0.9, True, 1),
    (0.8, False, 0),
    (0.7, True, 0),
    (0.6, False, 1),
    (0.5, True, 1),
    (0.5, False, 0),
    (0.3, True, 0),
    (0.1, False, 1),
]

# Hand-computed prefix gains for the descending-score order of ROWS8.
QINI8_GAINS = [0.0, 1.0, 1.0, 1.0, 0.0, 0.5, 1.0, 2 / 3, 0.0]
UPLIFT8_GAINS = [0.0, 1.0, 2.0, 1.5, 0.0, 5 / 6, 2.0, 7 / 6, 0.0]
QINI8_AREA = 31 / 48
UPLIFT8_AREA = 17 / 16
QINI8_OPT_AREA = 35 / 24
QINI8_NORM = 31 / 70  # (31/48 - 0) / (35/24 - 0)
UPLIFT8_OPT_AREA = 35 / 16
AUUC8_NORM = 17 / 35  # (17/16 - 0) / (35/16 - 0)


def scored(rows) -> Scored:
    return Scored.from_arrays(
        [r[0] for r in rows], [r[2] for r in rows], [r[1] for r in rows]
    )


def close(a, b, tol=1e-12):
    if math.isnan(a) or math.isnan(b):
        return math.isnan(a) and math.isnan(b)
    return abs(a - b) <= tol


# ---------------------------------------------------------------------------
# 8-sample hand fixture
# ---------------------------------------------------------------------------


def test_qini_curve_matches_hand_computation():
    curve = qini_curve(scored(ROWS8))
    assert np.allclose(curve.gains, QINI8_GAINS, atol=1e-12)
    assert np.allclose(curve.fractions, np.arange(9) / 8)
    assert close(curve.area, QINI8_AREA)


def test_uplift_curve_matches_hand_computation():
    curve = uplift_curve(scored(ROWS8))
    assert np.allclose(curve.gains, UPLIFT8_GAINS, atol=1e-12)
    assert close(curve.area, UPLIFT8_AREA)


def test_qini_score_matches_hand_value():
    assert close(qini_score(scored(ROWS8)), QINI8_NORM)


def test_auuc_matches_hand_value():
    assert close(auuc(scored(ROWS8)), AUUC8_NORM)


def test_factorial_envelope_qini():
    worst, best = oracles.area_envelope(ROWS8, oracles.qini_gains_for_order)
    sc = scored(ROWS8)
    opt_gains = oracles.qini_gains_for_order(ROWS8, list(optimum_order(sc)))
    opt_area = oracles.trapezoid_area(opt_gains, 8)
    # The ordering convention attains the true factorial maximum here.
    assert opt_area == best
    assert close(opt_area, QINI8_OPT_AREA)
    model = qini_curve(sc).area
    assert worst - 1e-12 <= model <= best + 1e-12


def test_factorial_envelope_uplift_curve():
    worst, best = oracles.area_envelope(ROWS8, oracles.uplift_gains_for_order)
    sc = scored(ROWS8)
    opt_gains = oracles.uplift_gains_for_order(ROWS8, list(optimum_order(sc)))
    opt_area = oracles.trapezoid_area(opt_gains, 8)
    assert close(opt_area, UPLIFT8_OPT_AREA) and close(opt_area, best)
    model = uplift_curve(sc).area
    assert worst - 1e-12 <= model <= best + 1e-12


def test_optimum_fed_back_scores_one():
    sc = scored(ROWS8)
    order = optimum_order(sc)
    scores = np.empty(8)
    scores[order] = np.arange(8, 0, -1, dtype=float)
    re_scored = Scored.from_arrays(scores, sc.outcomes, sc.treated)
    assert abs(qini_score(re_scored) - 1.0) < 1e-9
    assert abs(auuc(re_scored) - 1.0) < 1e-9


def test_reversed_perfect_scorer_negative_area():
    sc = scored(ROWS8)
    order = optimum_order(sc)
    scores = np.empty(8)
    scores[order] = np.arange(8, dtype=float)  # ascending: reversed optimum
    re_scored = Scored.from_arrays(scores, sc.outcomes, sc.treated)
    assert qini_curve(re_scored).area < 0
    assert uplift_curve(re_scored).area < 0
    assert qini_score(re_scored) < 0


# ---------------------------------------------------------------------------
# average uplift and uplift@k
# ---------------------------------------------------------------------------


def test_average_uplift_equal_rates_is_zero():
    rows = [(0.0, True, 1), (0.0, True, 0), (0.0, False, 1), (0.0, False, 0)]
    assert average_uplift(scored(rows)) == 0.0


def test_average_uplift_six_sample_hand_set():
    rows = [
        (0.5, True, 1),
        (0.4, True, 1),
        (0.3, True, 0),
        (0.2, False, 1),
        (0.1, False, 0),
        (0.0, False, 0),
    ]
    assert close(average_uplift(scored(rows)), 2 / 3 - 1 / 3)


def test_average_uplift_information_marginals():
    # 6,840 treated with 1,463 positives; 39,764 controls with 5,347.
    outcomes = np.concatenate(
        [np.ones(1463), np.zeros(6840 - 1463), np.ones(5347), np.zeros(39764 - 5347)]
    )
    treated = np.concatenate([np.ones(6840, dtype=bool), np.zeros(39764, dtype=bool)])
    val = average_uplift(Scored.from_arrays(np.zeros(46604), outcomes, treated))
    assert close(val, 1463 / 6840 - 5347 / 39764)
    assert abs(val - 0.0794) < 5e-4


def test_uplift_at_k_ten_sample_hand_set():
    rows = [
        (10.0, True, 1),
        (9.0, False, 0),
        (8.0, True, 0),
        (7.0, False, 1),
        (6.0, True, 1),
        (5.0, False, 0),
        (4.0, True, 0),
        (3.0, False, 1),
        (2.0, True, 1),
        (1.0, False, 0),
    ]
    res = uplift_at_k(scored(rows), 0.3)
    assert res.n_slice == 3 and res.n_treated == 2 and res.n_control == 1
    assert close(res.value, 0.5 - 0.0)
    assert res.defined


def test_uplift_at_k_constant_scores_uses_input_order():
    rows = [
        (1.0, True, 1),
        (1.0, False, 1),
        (1.0, True, 0),
        (1.0, False, 0),
        (1.0, True, 1),
        (1.0, False, 1),
        (1.0, True, 1),
        (1.0, False, 0),
        (1.0, True, 0),
        (1.0, False, 1),
    ]
    res = uplift_at_k(scored(rows), 0.3)
    # stable top-3 slice is just the first three rows
    assert close(res.value, 0.5 - 1.0)


def test_uplift_at_k_scale_invariant():
    base = uplift_at_k(scored(ROWS8), 0.3).value
    rows5 = [(5.0 * s, t, y) for s, t, y in ROWS8]
    assert close(uplift_at_k(scored(rows5), 0.3).value, base)


def test_uplift_at_k_degenerate_slice_is_defined_missing():
    rows = [
        (9.0, True, 1),
        (8.0, True, 0),
        (7.0, True, 1),
        (1.0, False, 0),
        (0.5, False, 1),
        (0.4, False, 0),
        (0.3, False, 0),
        (0.2, False, 1),
        (0.1, False, 0),
        (0.05, False, 1),
    ]
    res = uplift_at_k(scored(rows), 0.3)
    assert not res.defined
    assert math.isnan(res.value)
    assert "control" in res.reason


def test_uplift_at_k_rejects_bad_k():
    with pytest.raises(SizeError):
        uplift_at_k(scored(ROWS8), 0.0)
    with pytest.raises(SizeError):
        uplift_at_k(scored(ROWS8), 1.5)


@pytest.mark.parametrize("fn", [average_uplift, qini_score, auuc, qini_curve, uplift_curve])
def test_empty_arm_rejected(fn):
    all_treated = [(0.5, True, 1), (0.4, True, 0)]
    with pytest.raises(SizeError):
        fn(scored(all_treated))
    with pytest.raises(SizeError):
        fn(Scored.from_arrays([], [], []))


def test_scored_validation():
    with pytest.raises(SchemaError):
        Scored.from_arrays([float("nan")], [0], [True])
    with pytest.raises(SchemaError):
        Scored.from_arrays([0.1], [2], [True])
    with pytest.raises(SchemaError):
        Scored.from_arrays([0.1, 0.2], [0], [True])


def test_scored_sample_layer():
    samples = [ScoredSample(s, t, y) for s, t, y in ROWS8]
    assert close(qini_score(samples), QINI8_NORM)
    report = evaluate_scores(samples)
    assert report.n == 8 and report.n_treated == 4 and report.n_control == 4
    assert close(report.qini, QINI8_NORM)
    assert close(report.average_uplift, 0.0)


# ---------------------------------------------------------------------------
# Properties vs the oracle
# ---------------------------------------------------------------------------

# a small score grid so ties occur often
row = st.tuples(
    st.integers(-5, 5).map(lambda v: v * 0.5), st.booleans(), st.integers(0, 1)
)


@st.composite
def score_rows(draw, max_size=10):
    rows = draw(st.lists(row, min_size=2, max_size=max_size))
    arms = {r[1] for r in rows}
    if arms != {True, False}:
        rows = rows + [(0.0, True, draw(st.integers(0, 1))), (0.0, False, draw(st.integers(0, 1)))]
    return rows


def assert_ratio_matches_oracle(lib_value, rows, kind):
    score, den = oracles.normalized_exact(rows, kind)
    if score is None or abs(den) < 2e-9:
        # flat or guard-boundary headroom: the library must report NaN or we
        # are inside the band where float summation order decides
        if abs(den) == 0:
            assert math.isnan(lib_value)
        return
    # scores are ratios; loosen by the conditioning of the division
    tol = 1e-12 + 3e-13 / abs(float(den))
    assert abs(lib_value - float(score)) <= tol


@settings(max_examples=120, deadline=None)
@given(score_rows())
def test_library_matches_oracle(rows):
    sc = scored(rows)
    assert_ratio_matches_oracle(qini_score(sc), rows, "qini")
    assert_ratio_matches_oracle(auuc(sc), rows, "uplift")
    assert close(average_uplift(sc), oracles.average_uplift(rows))
    assert close(uplift_at_k(sc, 0.3).value, oracles.uplift_at_k(rows, 0.3))
    order = oracles.sort_desc_stable([r[0] for r in rows])
    assert np.allclose(
        qini_curve(sc).gains, oracles.qini_gains_for_order(rows, order), atol=1e-12
    )
    assert np.allclose(
        uplift_curve(sc).gains, oracles.uplift_gains_for_order(rows, order), atol=1e-12
    )


def test_flat_headroom_is_defined_missing():
    # five treated responders and one control nonresponder: every ordering
    # yields the same straight uplift curve, so there is nothing to divide by
    # (the qini curve still kinks at the control step and normalizes fine)
    rows = [(0.0, True, 1)] * 5 + [(0.0, False, 0)]
    assert math.isnan(auuc(scored(rows)))
    assert close(qini_score(scored(rows)), 1.0)
    score, den = oracles.normalized_exact(rows, "uplift")
    assert score is None and den == 0


@settings(max_examples=80, deadline=None)
@given(score_rows())
def test_curve_shape_invariants(rows):
    for curve in (qini_curve(scored(rows)), uplift_curve(scored(rows))):
        assert curve.gains[0] == 0.0 and curve.fractions[0] == 0.0
        assert curve.fractions[-1] == 1.0
        assert (np.diff(curve.fractions) > 0).all()
        assert len(curve.gains) == len(rows) + 1


@settings(max_examples=80, deadline=None)
@given(score_rows())
def test_rank_invariance_under_monotone_transform(rows):
    # cubing integers is strictly monotone and exact, so ranks are identical
    int_rows = [(float(int(2 * s)), t, y) for s, t, y in rows]
    cubed = [(s**3, t, y) for s, t, y in int_rows]
    assert close(qini_score(scored(int_rows)), qini_score(scored(cubed)))
    assert close(auuc(scored(int_rows)), auuc(scored(cubed)))
    assert close(
        uplift_at_k(scored(int_rows), 0.3).value, uplift_at_k(scored(cubed), 0.3).value
    )


@settings(max_examples=80, deadline=None)
@given(score_rows(), st.randoms())
def test_permutation_invariance_with_distinct_scores(rows, rnd):
    # distinct scores make the stable tie-break irrelevant
    rows = [((i + 1) * 1.25 + r[0] * 20.0, r[1], r[2]) for i, r in enumerate(rows)]
    if len({r[0] for r in rows}) != len(rows):
        return
    shuffled = rows[:]
    rnd.shuffle(shuffled)
    assert close(qini_score(scored(rows)), qini_score(scored(shuffled)))
    assert close(auuc(scored(rows)), auuc(scored(shuffled)))
    assert close(
        uplift_at_k(scored(rows), 0.3).value, uplift_at_k(scored(shuffled), 0.3).value
    )


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------


def test_curve_csv_golden():
    got = curve_to_csv(qini_curve(scored(ROWS8)))
    assert got == (GOLDEN / "qini8_curve.csv").read_text()


def test_curve_csv_round_trips_floats():
    text = curve_to_csv(uplift_curve(scored(ROWS8)))
    body = [line.split(",") for line in text.strip().splitlines()[1:]]
    gains = [float(g) for _, g in body]
    assert gains == list(uplift_curve(scored(ROWS8)).gains)


def test_svg_golden():
    sc = scored(ROWS8)
    svg = curves_to_svg({"model": qini_curve(sc), "optimum": Curve(
        qini_curve(sc).fractions,
        np.asarray(oracles.qini_gains_for_order(ROWS8, list(optimum_order(sc)))),
        QINI8_OPT_AREA,
    )}, title="qini")
    assert svg == (GOLDEN / "qini8_curves.svg").read_text()
    assert svg.startswith("<svg ") or svg.startswith("<svg\n")
