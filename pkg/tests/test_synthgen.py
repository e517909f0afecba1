"""Generator tests: ground-truth bookkeeping, calibration math, determinism.

The truth formula is re-derived here from the *stored* treatment sequences
with hand-set coefficients, so any mismatch between what the generator
simulated and what it wrote into the dataset shows up immediately.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from uplift_mtd import synthgen as sg
from uplift_mtd.data import collapse_multi, save_dataset
from uplift_mtd.errors import CalibrationError, ConfigError
from uplift_mtd.metrics import Scored, qini_score
from uplift_mtd.synthgen import (
    REGISTRY_BASIC,
    GeneratorSpec,
    TargetMarginals,
    generate,
    make_time_sensitive_suite,
)


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def acts_of(sample):
    """(category, timestamp) pairs recovered from the stored matrix."""
    seq = sample.treatments
    out = []
    for step in range(seq.n_steps):
        for cat in np.flatnonzero(seq.matrix[step]):
            out.append((int(cat), float(seq.timestamps[step])))
    return out


# ---------------------------------------------------------------------------
# Ground-truth bookkeeping
# ---------------------------------------------------------------------------


def test_zero_effect_means_zero_ite_everywhere():
    ds = generate(sg.null_spec(300, seed=7))
    assert len(ds) == 300
    assert ds.treated_flags().any() and not ds.treated_flags().all()
    assert (ds.true_ites() == 0.0).all()


def test_single_act_sigmoid_difference_by_hand():
    # forced single act, flat baseline 0, act effect -1
    spec = GeneratorSpec(
        n=5,
        d=2,
        k=1,
        s=1,
        baseline_fn="constant",
        baseline_params={"intercept": 0.0},
        effect_fn="constant",
        effect_params={"delta": -1.0},
        treatment_propensity_fn="constant",
        propensity_params={"act_prob": 1.0},
        seed=0,
    )
    ds = generate(spec)
    expected = sigmoid(-1.0) - sigmoid(0.0)
    for smp in ds:
        assert len(acts_of(smp)) == 1
        assert smp.true_ite == pytest.approx(expected, abs=1e-12)


def test_stored_truth_matches_recomputation_per_category():
    deltas = [0.9, -0.4, 1.3, 0.0, -1.1, 0.2]
    spec = GeneratorSpec(
        n=120,
        d=3,
        k=6,
        s=4,
        baseline_fn="constant",
        baseline_params={"intercept": -1.5},
        effect_fn="per_category",
        effect_params={"deltas": deltas},
        treatment_propensity_fn="constant",
        propensity_params={"act_prob": 0.7},
        seed=11,
    )
    ds = generate(spec)
    assert ds.treated_flags().sum() > 60
    for smp in ds:
        logit = math.fsum(deltas[cat] for cat, _ in acts_of(smp))
        want = sigmoid(-1.5 + logit) - sigmoid(-1.5)
        assert smp.true_ite == pytest.approx(want, abs=1e-12)
        assert smp.outcome in (0, 1)


def test_stored_truth_matches_recomputation_time_decay():
    spec = GeneratorSpec(
        n=100,
        d=2,
        k=2,
        s=3,
        baseline_fn="constant",
        baseline_params={"intercept": -0.8},
        effect_fn="time_decay",
        effect_params={"delta": 1.2, "tau": 140.0},
        treatment_propensity_fn="constant",
        propensity_params={"act_prob": 0.6},
        seed=4,
    )
    for smp in generate(spec):
        logit = math.fsum(1.2 * math.exp(-ts / 140.0) for _, ts in acts_of(smp))
        want = sigmoid(-0.8 + logit) - sigmoid(-0.8)
        assert smp.true_ite == pytest.approx(want, abs=1e-12)


def test_ite_is_a_probability_difference():
    for spec_fn in (sg.linear_rct_spec, sg.info_effect_spec, sg.confounded_spec):
        ites = generate(spec_fn(400, seed=2)).true_ites()
        assert (ites > -1.0).all() and (ites < 1.0).all()


def test_timestamps_sorted_within_horizon():
    ds = generate(sg.info_effect_spec(200, seed=9))
    for smp in ds:
        seq = smp.treatments
        live = seq.timestamps[: seq.n_steps]
        assert (np.diff(live) >= 0).all()
        assert ((live >= 0) & (live <= sg.HORIZON_DAYS)).all()


# ---------------------------------------------------------------------------
# Determinism and order independence
# ---------------------------------------------------------------------------


def test_same_spec_same_bytes(tmp_path):
    spec = sg.info_effect_spec(150, seed=13)
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    save_dataset(generate(spec), a)
    save_dataset(generate(spec), b)
    assert a.read_bytes() == b.read_bytes()


def test_sample_streams_do_not_depend_on_population_size():
    small = generate(sg.linear_rct_spec(30, seed=21))
    big = generate(sg.linear_rct_spec(80, seed=21))
    for lhs, rhs in zip(small, big):
        assert lhs.id == rhs.id
        assert lhs.outcome == rhs.outcome
        assert lhs.true_ite == rhs.true_ite
        assert np.array_equal(lhs.context, rhs.context)
        assert np.array_equal(lhs.treatments.matrix, rhs.treatments.matrix)
        assert np.array_equal(lhs.treatments.timestamps, rhs.treatments.timestamps)


def test_seed_changes_draws():
    a = generate(sg.linear_rct_spec(50, seed=0))
    b = generate(sg.linear_rct_spec(50, seed=1))
    assert any(x.outcome != y.outcome or x.true_ite != y.true_ite for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# Monotone effect strength
# ---------------------------------------------------------------------------


def test_stronger_protective_effect_weakly_lowers_ite():
    def spec(delta):
        return GeneratorSpec(
            n=250,
            d=4,
            k=3,
            s=3,
            baseline_fn="linear",
            baseline_params={"intercept": -1.0, "weight_scale": 0.6},
            effect_fn="constant",
            effect_params={"delta": delta},
            treatment_propensity_fn="constant",
            propensity_params={"act_prob": 0.5},
            seed=17,
        )

    mild = generate(spec(-0.8))
    strong = generate(spec(-1.6))
    # same propensity stream, so both runs realize identical act patterns
    for a, b in zip(mild, strong):
        assert np.array_equal(a.treatments.matrix, b.treatments.matrix)
        assert b.true_ite <= a.true_ite + 1e-15
        if not a.treated:
            assert a.true_ite == 0.0 == b.true_ite
    assert strong.true_ites().min() < mild.true_ites().min()


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


def test_calibrated_equations_hold_against_quadrature():
    model = sg._Model(sg.registry_spec(10, seed=1))
    tm = REGISTRY_BASIC
    s = 4

    assert model.act_prob == pytest.approx(1.0 - (tm.control / tm.total) ** 0.25, abs=1e-15)

    ctrl = oracles.expect_sigmoid_quad(model.intercept, model.noise_sd)
    assert ctrl == pytest.approx(tm.control_rate, abs=1e-9)

    tau = model.act_prob
    pmf = [oracles.binomial_pmf(s, m, tau) for m in range(s + 1)]
    live = sum(pmf[1:])
    treated = sum(
        pmf[m] / live * oracles.expect_sigmoid_quad(model.intercept + m * model.effect_delta, model.noise_sd)
        for m in range(1, s + 1)
    )
    assert treated == pytest.approx(tm.treated_rate, abs=1e-9)


def test_registry_preset_marginals_within_two_points():
    ds = sg.preset("table2-basic", n=15000, seed=0)
    t, y = ds.treated_flags(), ds.outcomes()
    assert abs(t.mean() - REGISTRY_BASIC.treated_fraction) < 0.02
    assert abs(y[~t].mean() - REGISTRY_BASIC.control_rate) < 0.02
    assert abs(y[t].mean() - REGISTRY_BASIC.treated_rate) < 0.02


@pytest.mark.parametrize(
    "marginals, phrase",
    [
        (TargetMarginals(100, 100, 10, 10), "treated must lie strictly"),
        (TargetMarginals(100, 40, 61, 10), "control_positive"),
        (TargetMarginals(100, 40, 10, 41), "treated_positive"),
        (TargetMarginals(100, 40, 0, 10), "control positive rate"),
        (TargetMarginals(100, 40, 10, 40), "treated positive rate"),
    ],
)
def test_infeasible_marginals_name_the_constraint(marginals, phrase):
    spec = GeneratorSpec(n=5, effect_fn="constant", target_marginals=marginals)
    with pytest.raises(CalibrationError, match=phrase):
        generate(spec)


def test_calibration_rejects_unsupported_families():
    spec = GeneratorSpec(n=5, effect_fn="zero", target_marginals=REGISTRY_BASIC)
    with pytest.raises(CalibrationError, match="constant effect"):
        generate(spec)
    spec = GeneratorSpec(
        n=5, effect_fn="constant", treatment_propensity_fn="logistic", target_marginals=REGISTRY_BASIC
    )
    with pytest.raises(CalibrationError, match="constant propensity"):
        generate(spec)


def test_unknown_families_rejected():
    with pytest.raises(ConfigError, match="baseline"):
        GeneratorSpec(n=1, baseline_fn="cubic")
    with pytest.raises(ConfigError, match="preset"):
        sg.preset("no-such-suite")


# ---------------------------------------------------------------------------
# Confounding knob
# ---------------------------------------------------------------------------


def test_logistic_propensity_ties_treatment_to_context():
    spec = sg.confounded_spec(4000, seed=3)
    model = sg._Model(spec)
    ds = generate(spec)
    score = ds.contexts() @ model.propensity_direction
    t = ds.treated_flags()
    top, bottom = t[score > np.median(score)], t[score <= np.median(score)]
    assert top.mean() > bottom.mean() + 0.1


def test_constant_propensity_is_context_free():
    ds = generate(sg.null_spec(6000, seed=5))
    x0 = ds.contexts()[:, 0]
    t = ds.treated_flags()
    assert abs(t[x0 > 0].mean() - t[x0 <= 0].mean()) < 0.05


# ---------------------------------------------------------------------------
# Randomized-arm ATE agrees with mean truth
# ---------------------------------------------------------------------------


def test_empirical_ate_matches_mean_ite_at_scale():
    ds = generate(sg.linear_rct_spec(50_000, seed=1))
    t, y = ds.treated_flags(), ds.outcomes()
    ate = y[t].mean() - y[~t].mean()
    want = ds.true_ites()[t].mean()
    se = math.sqrt(y[t].var() / t.sum() + y[~t].var() / (~t).sum())
    assert abs(ate - want) < 3.0 * se


# ---------------------------------------------------------------------------
# Time-sensitive benchmark
# ---------------------------------------------------------------------------


def test_suite_composition_and_roles():
    n = 500
    ds = make_time_sensitive_suite(n, seed=2)
    assert len(ds) == n
    assert ds.label == "time-sensitive"
    ids = [smp.id for smp in ds]
    n_pairs = sum(1 for i in ids if i.startswith("p") and i.endswith("a"))
    assert n_pairs == n // 5
    assert sum(1 for i in ids if i.startswith("s")) == int(0.3 * n + 0.5)
    for smp in ds:
        assert smp.id.startswith("c") == (not smp.treated)


def test_twins_swap_order_and_flip_effect_sign():
    seed = 6
    ds = make_time_sensitive_suite(400, seed=seed)
    weights = sg._TS_WEIGHT_SCALE * np.random.default_rng([seed, 1, 0]).standard_normal(sg._TS_DIM)
    weights /= math.sqrt(sg._TS_DIM)
    by_id = {smp.id: smp for smp in ds}
    pairs = sorted(i[:-1] for i in by_id if i.startswith("p") and i.endswith("a"))
    assert pairs
    for stem in pairs:
        a, b = by_id[stem + "a"], by_id[stem + "b"]
        assert np.array_equal(a.context, b.context)
        assert np.array_equal(a.treatments.timestamps, b.treatments.timestamps)
        assert np.array_equal(a.treatments.matrix[::-1], b.treatments.matrix)
        assert a.true_ite > 0.0 > b.true_ite  # category 0 first pushes up
        # effect logits are exact mirrors; the probability differences are not
        base = sg._TS_INTERCEPT + float(weights @ a.context)
        t0, t1 = a.treatments.timestamps
        effect = sg._ramp(0, t0) + sg._ramp(1, t1)
        assert a.true_ite == pytest.approx(sigmoid(base + effect) - sigmoid(base), abs=1e-12)
        assert b.true_ite == pytest.approx(sigmoid(base - effect) - sigmoid(base), abs=1e-12)


def test_single_act_effect_fades_and_flips_across_the_year():
    ds = make_time_sensitive_suite(2000, seed=8)
    singles = [smp for smp in ds if smp.id.startswith("s")]
    early = [s for s in singles if s.treatments.timestamps[0] < 100]
    late = [s for s in singles if s.treatments.timestamps[0] > 265]
    cat = lambda s: int(np.flatnonzero(s.treatments.matrix[0])[0])
    assert all(s.true_ite > 0 for s in early if cat(s) == 0)
    assert all(s.true_ite < 0 for s in late if cat(s) == 0)
    assert all(s.true_ite < 0 for s in early if cat(s) == 1)


def test_collapsed_view_hides_real_effect_differences():
    ds = make_time_sensitive_suite(300, seed=4)
    collapsed = collapse_multi(ds)
    groups = {}
    for smp in collapsed:
        key = (smp.context.tobytes(), tuple(smp.presence.astype(int)))
        groups.setdefault(key, []).append(smp.true_ite)
    spreads = [max(v) - min(v) for v in groups.values() if len(v) > 1]
    assert spreads and max(spreads) > 0.1


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_truth_scores_beat_collapsed_truth_scores_on_qini(seed):
    # Best score function constant on collapse-identical samples: group means.
    # Only the twin stratum actually blurs, so the gap is real but modest.
    ds = make_time_sensitive_suite(3000, seed=seed)
    t, y, ite = ds.treated_flags(), ds.outcomes(), ds.true_ites()

    groups = {}
    for i, smp in enumerate(collapse_multi(ds)):
        key = (smp.context.tobytes(), tuple(smp.presence.astype(int)))
        groups.setdefault(key, []).append(i)
    blind = np.empty(len(ds))
    for idx in groups.values():
        blind[idx] = ite[idx].mean()
    assert sum(1 for v in groups.values() if len(v) > 1) == len(ds) // 5

    sharp = qini_score(Scored.from_arrays(ite, y, t))
    blurred = qini_score(Scored.from_arrays(blind, y, t))
    assert sharp > blurred + 0.004


def test_suite_bytes_deterministic(tmp_path):
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    save_dataset(make_time_sensitive_suite(200, seed=3), a)
    save_dataset(make_time_sensitive_suite(200, seed=3), b)
    assert a.read_bytes() == b.read_bytes()


def test_tiny_suite_sizes_still_add_up():
    for n in (0, 1, 2, 3, 4, 5, 7):
        assert len(make_time_sensitive_suite(n, seed=0)) == n


# ---------------------------------------------------------------------------
# Presets and validity under fuzzing
# ---------------------------------------------------------------------------


def test_every_preset_yields_requested_size():
    for name in sg.PRESETS:
        ds = sg.preset(name, n=40, seed=1)
        assert len(ds) == 40
        assert ds.has_truth


@settings(max_examples=25, deadline=None)
@given(
    baseline=st.sampled_from(sg.BASELINE_FAMILIES),
    effect=st.sampled_from(sg.EFFECT_FAMILIES),
    propensity=st.sampled_from(sg.PROPENSITY_FAMILIES),
    k=st.integers(1, 4),
    s=st.integers(1, 3),
    seed=st.integers(0, 2**20),
)
def test_random_specs_yield_valid_datasets(baseline, effect, propensity, k, s, seed):
    spec = GeneratorSpec(
        n=6,
        d=3,
        k=k,
        s=s,
        baseline_fn=baseline,
        effect_fn=effect,
        treatment_propensity_fn=propensity,
        seed=seed,
    )
    ds = generate(spec)
    ds.validate()
    ites = ds.true_ites()
    assert ((ites > -1.0) & (ites < 1.0)).all()
    for smp in ds:
        if not smp.treated:
            assert smp.true_ite == 0.0
