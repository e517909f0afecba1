"""Reference learners and the S/T meta-learners."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uplift_mtd.baselines import (
    BoostConfig,
    GradientBoostedTrees,
    LogisticConfig,
    LogisticRegressionGD,
    SLearner,
    TLearner,
)
from uplift_mtd.errors import TrainingError


def make_blobs(seed, n=200):
    """Two linearly separable 2-D clusters."""
    rng = np.random.default_rng(seed)
    x0 = rng.normal(loc=(-2.0, -2.0), scale=0.5, size=(n // 2, 2))
    x1 = rng.normal(loc=(2.0, 2.0), scale=0.5, size=(n // 2, 2))
    x = np.vstack([x0, x1])
    y = np.concatenate([np.zeros(n // 2), np.ones(n // 2)])
    return x, y


def make_xor(seed, n=400):
    rng = np.random.default_rng(seed)
    centers = np.array([[-2, -2], [2, 2], [-2, 2], [2, -2]], dtype=float)
    labels = np.array([0.0, 0.0, 1.0, 1.0])
    per = n // 4
    x = np.vstack([rng.normal(c, 0.4, size=(per, 2)) for c in centers])
    y = np.repeat(labels, per)
    return x, y


# ---------------------------------------------------------------------------
# Logistic learner
# ---------------------------------------------------------------------------


def test_logistic_separates_blobs():
    x, y = make_blobs(0)
    model = LogisticRegressionGD().fit(x, y)
    pred = (model.predict_proba(x) > 0.5).astype(float)
    assert (pred == y).all()


def test_logistic_single_class_returns_clamped_rate():
    x = np.random.default_rng(0).normal(size=(10, 3))
    model = LogisticRegressionGD().fit(x, np.ones(10))
    assert np.allclose(model.predict_proba(x), 1.0 - 1e-7)
    model0 = LogisticRegressionGD().fit(x, np.zeros(10))
    assert np.allclose(model0.predict_proba(x), 1e-7)


def test_logistic_constant_column_is_inert():
    x, y = make_blobs(3)
    base = LogisticRegressionGD().fit(x, y).predict_proba(x)
    x_aug = np.column_stack([x, np.full(len(x), 7.5)])
    aug = LogisticRegressionGD().fit(x_aug, y).predict_proba(x_aug)
    assert np.max(np.abs(base - aug)) < 1e-8


def test_logistic_deterministic():
    x, y = make_blobs(5)
    a = LogisticRegressionGD().fit(x, y).predict_proba(x)
    b = LogisticRegressionGD().fit(x, y).predict_proba(x)
    assert np.array_equal(a, b)


def test_logistic_probabilities_in_open_interval():
    x, y = make_blobs(7)
    p = LogisticRegressionGD(LogisticConfig(iterations=2000)).fit(x, y).predict_proba(x * 10)
    assert (p > 0).all() and (p < 1).all()


# ---------------------------------------------------------------------------
# Boosted trees
# ---------------------------------------------------------------------------


def test_boosted_trees_solve_xor():
    x, y = make_xor(1)
    model = GradientBoostedTrees(BoostConfig(n_rounds=100, max_depth=2)).fit(x, y)
    acc = ((model.predict_proba(x) > 0.5) == (y > 0.5)).mean()
    assert acc > 0.95


def test_boosted_trees_single_class():
    x = np.random.default_rng(1).normal(size=(8, 2))
    model = GradientBoostedTrees().fit(x, np.zeros(8))
    assert np.allclose(model.predict_proba(x), 1e-7)


def test_boosted_trees_constant_column_is_inert():
    x, y = make_xor(2, n=200)
    base = GradientBoostedTrees().fit(x, y).predict_proba(x)
    x_aug = np.column_stack([np.full(len(x), -3.25), x])
    aug = GradientBoostedTrees().fit(x_aug, y).predict_proba(x_aug)
    assert np.max(np.abs(base - aug)) < 1e-8


def test_boosted_trees_deterministic():
    x, y = make_xor(3, n=200)
    a = GradientBoostedTrees().fit(x, y).predict_proba(x)
    b = GradientBoostedTrees().fit(x, y).predict_proba(x)
    assert np.array_equal(a, b)


def test_boosted_trees_train_predict_routing_agrees():
    # raw-threshold prediction must reproduce training-time binned routing,
    # including on boundary values like a binary treatment column
    from uplift_mtd.baselines import _bin_columns, _predict_tree_binned, _predict_tree_raw

    rng = np.random.default_rng(4)
    x = np.column_stack([rng.normal(size=120), rng.integers(0, 2, 120).astype(float)])
    y = ((x[:, 1] == 1) ^ (rng.uniform(size=120) < 0.2)).astype(float)
    model = GradientBoostedTrees(BoostConfig(n_rounds=10)).fit(x, y)
    binned, _ = _bin_columns(x, model.config.n_bins)
    for tree in model._trees:
        assert np.array_equal(
            _predict_tree_binned(tree, binned), _predict_tree_raw(tree, x)
        )


def test_predict_before_fit_raises():
    with pytest.raises(TrainingError):
        GradientBoostedTrees().predict_proba(np.zeros((1, 2)))
    with pytest.raises(TrainingError):
        LogisticRegressionGD().predict_proba(np.zeros((1, 2)))


# ---------------------------------------------------------------------------
# Meta-learners
# ---------------------------------------------------------------------------


def uplift_toy(seed, n=400, effect=0.4):
    """Outcome base rate rises with x0; treatment adds `effect` on top."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    t = (rng.uniform(size=n) < 0.5).astype(float)
    base = 0.25 + 0.1 * (x[:, 0] > 0)
    p = np.clip(base + effect * t, 0.01, 0.99)
    y = (rng.uniform(size=n) < p).astype(float)
    return x, t, y


def test_s_learner_ignoring_t_gives_zero_ite():
    class IgnoreLastColumn:
        def fit(self, x, y):
            self.inner = LogisticRegressionGD().fit(x[:, :-1], y)
            return self

        def predict_proba(self, x):
            return self.inner.predict_proba(x[:, :-1])

    x, t, y = uplift_toy(0)
    model = SLearner(IgnoreLastColumn).fit(x, t, y)
    assert np.allclose(model.predict_ite(x), 0.0)


def test_s_learner_sign_on_deterministic_flip():
    # two separable groups; treatment flips the label, so the effect is +1 in
    # the x0=+1 group and -1 in the other; predicted signs must all match
    rng = np.random.default_rng(5)
    x = np.column_stack([rng.choice([-1.0, 1.0], size=300), rng.normal(size=300)])
    t = (rng.uniform(size=300) < 0.5).astype(float)
    y = np.where(t == 1.0, (x[:, 0] > 0).astype(float), (x[:, 0] < 0).astype(float))
    model = SLearner(GradientBoostedTrees).fit(x, t, y)
    ite = model.predict_ite(x)
    signs = np.where(x[:, 0] > 0, 1.0, -1.0)
    assert (np.sign(ite) == signs).all()
    assert (np.abs(ite) > 0.9).all()


def test_t_learner_identical_arms_near_zero():
    rng = np.random.default_rng(9)
    x_arm = rng.normal(size=(150, 2))
    y_arm = (rng.uniform(size=150) < 0.3).astype(float)
    x = np.vstack([x_arm, x_arm])
    t = np.concatenate([np.ones(150), np.zeros(150)])
    y = np.concatenate([y_arm, y_arm])
    model = TLearner(LogisticRegressionGD).fit(x, t, y)
    assert np.max(np.abs(model.predict_ite(x))) < 0.05


def test_t_learner_arm_constant_labels():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(200, 2))
    t = np.concatenate([np.ones(100), np.zeros(100)])
    y = t.copy()  # treated all 1, control all 0
    model = TLearner(GradientBoostedTrees).fit(x, t, y)
    assert (model.predict_ite(x) > 0.99).all()


def test_meta_learners_reject_single_arm():
    x = np.zeros((4, 2))
    with pytest.raises(TrainingError, match="control"):
        SLearner().fit(x, np.ones(4), np.zeros(4))
    with pytest.raises(TrainingError, match="treated"):
        TLearner().fit(x, np.zeros(4), np.zeros(4))


class LookupLearner:
    """Memorizes the mean label per exact feature row; 0.5 on unseen rows."""

    def fit(self, x, y):
        self.table = {}
        for row, label in zip(map(tuple, x), y):
            self.table.setdefault(row, []).append(label)
        self.table = {k: float(np.mean(v)) for k, v in self.table.items()}
        return self

    def predict_proba(self, x):
        return np.array([self.table.get(tuple(row), 0.5) for row in x])


def test_s_and_t_agree_with_lookup_on_exhaustive_arms():
    # tiny discrete feature space; every point appears in both arms
    points = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]
    rates_c = [0.0, 1.0, 0.5, 0.25]
    rates_t = [1.0, 0.0, 0.75, 0.25]
    x_rows, t_rows, y_rows = [], [], []
    for (px, py), rc, rt in zip(points, rates_c, rates_t):
        for arm, rate in ((0.0, rc), (1.0, rt)):
            for i in range(4):
                x_rows.append((px, py))
                t_rows.append(arm)
                y_rows.append(1.0 if i < rate * 4 else 0.0)
    x = np.array(x_rows)
    t = np.array(t_rows)
    y = np.array(y_rows)
    s_ite = SLearner(LookupLearner).fit(x, t, y).predict_ite(x)
    t_ite = TLearner(LookupLearner).fit(x, t, y).predict_ite(x)
    assert np.allclose(s_ite, t_ite, atol=1e-12)
    want = {pt: rt - rc for pt, rc, rt in zip(points, rates_c, rates_t)}
    assert np.allclose(s_ite, [want[tuple(r)] for r in x], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_ite_always_inside_open_unit_interval(seed):
    x, t, y = uplift_toy(seed, n=120)
    for model in (SLearner(LogisticRegressionGD), TLearner(LogisticRegressionGD)):
        ite = model.fit(x, t, y).predict_ite(x)
        assert (ite > -1.0).all() and (ite < 1.0).all()


def test_mean_ite_sign_tracks_true_effect():
    x, t, y = uplift_toy(33, n=2000, effect=0.35)
    for factory in (LogisticRegressionGD, GradientBoostedTrees):
        s = SLearner(factory).fit(x, t, y).predict_ite(x)
        tt = TLearner(factory).fit(x, t, y).predict_ite(x)
        assert s.mean() > 0.15 and tt.mean() > 0.15
