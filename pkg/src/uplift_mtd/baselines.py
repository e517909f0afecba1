"""Meta-learner baselines (S- and T-learner) with self-contained base learners.

The base learners are deliberately dependency-free and deterministic:

* ``LogisticRegressionGD``: L2-regularized logistic regression by full-batch
  gradient descent on standardized features, intercept unpenalized.
* ``GradientBoostedTrees``: histogram gradient boosting with depth-limited
  trees, logistic loss and Newton leaf values.

Either can be swapped for an external package through the factory argument
of SLearner/TLearner; everything downstream only needs fit/predict_proba.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import numpy as np

from .data import BinaryDataset
from .errors import SizeError, TrainingError

PROB_CLAMP = 1e-7


class BaseLearner(Protocol):
    def fit(self, features: np.ndarray, labels: np.ndarray) -> "BaseLearner": ...

    def predict_proba(self, features: np.ndarray) -> np.ndarray: ...


def _as_matrix(features) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    if x.ndim != 2:
        raise SizeError(f"feature matrix must be 2-D, got shape {x.shape}")
    return x


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if not np.isin(y, (0.0, 1.0)).all():
        raise TrainingError("labels must be binary")
    return y


def _constant_rate(y: np.ndarray) -> float:
    return float(np.clip(y.mean(), PROB_CLAMP, 1.0 - PROB_CLAMP))


# ---------------------------------------------------------------------------
# Logistic regression by gradient descent
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogisticConfig:
    iterations: int = 500
    learning_rate: float = 1.0
    l2: float = 1e-3


class LogisticRegressionGD:
    """Full-batch GD on mean log-loss + (l2/2)||w||^2, intercept unpenalized.

    Features are centered and scaled internally, so a constant column gets a
    centered value of exactly 0 and (with zero init) its weight never moves:
    adding such a column cannot change any prediction.
    """

    def __init__(self, config: LogisticConfig = LogisticConfig()):
        self.config = config
        self._w: Optional[np.ndarray] = None
        self._b = 0.0
        self._mu: Optional[np.ndarray] = None
        self._scale: Optional[np.ndarray] = None
        self._constant: Optional[float] = None

    def fit(self, features, labels) -> "LogisticRegressionGD":
        x = _as_matrix(features)
        y = _check_labels(labels)
        if len(x) != len(y) or len(y) == 0:
            raise SizeError("features/labels length mismatch or empty")
        if y.min() == y.max():
            self._constant = _constant_rate(y)
            return self
        self._constant = None
        self._mu = x.mean(axis=0)
        std = x.std(axis=0)
        self._scale = np.where(std > 1e-12, std, 1.0)
        z = (x - self._mu) / self._scale
        n, d = z.shape
        w = np.zeros(d)
        b = 0.0
        cfg = self.config
        for _ in range(cfg.iterations):
            p = _sigmoid(z @ w + b)
            err = (p - y) / n
            grad_w = z.T @ err + cfg.l2 * w
            grad_b = err.sum()
            w -= cfg.learning_rate * grad_w
            b -= cfg.learning_rate * grad_b
        self._w, self._b = w, b
        return self

    def predict_proba(self, features) -> np.ndarray:
        x = _as_matrix(features)
        if self._constant is not None:
            return np.full(len(x), self._constant)
        if self._w is None:
            raise TrainingError("predict before fit")
        z = (x - self._mu) / self._scale
        p = _sigmoid(z @ self._w + self._b)
        return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v, dtype=float)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


# ---------------------------------------------------------------------------
# Histogram gradient boosting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoostConfig:
    n_rounds: int = 100
    max_depth: int = 2
    shrinkage: float = 0.3
    n_bins: int = 64
    reg_lambda: float = 1.0
    min_gain: float = 1e-12


@dataclass
class _Node:
    feature: int = -1
    bin_cut: int = -1
    threshold: float = 0.0
    left: Optional["_Node"] = None
    right: Optional["_Node"] = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None


class GradientBoostedTrees:
    """Boosted depth-limited trees on quantile-binned features.

    Split gain is the usual second-order formula G^2/(H+lambda) improvement;
    leaf values are Newton steps -G/(H+lambda), scaled by the shrinkage.
    Fully deterministic: bin edges come from training quantiles and ties in
    gain resolve to the lowest (feature, bin) pair.
    """

    def __init__(self, config: BoostConfig = BoostConfig()):
        self.config = config
        self._trees: list[_Node] = []
        self._f0 = 0.0
        self._constant: Optional[float] = None

    def fit(self, features, labels) -> "GradientBoostedTrees":
        x = _as_matrix(features)
        y = _check_labels(labels)
        if len(x) != len(y) or len(y) == 0:
            raise SizeError("features/labels length mismatch or empty")
        if y.min() == y.max():
            self._constant = _constant_rate(y)
            return self
        self._constant = None
        cfg = self.config
        rate = _constant_rate(y)
        self._f0 = float(np.log(rate / (1.0 - rate)))
        binned, self._edges = _bin_columns(x, cfg.n_bins)
        raw = np.full(len(y), self._f0)
        self._trees = []
        for _ in range(cfg.n_rounds):
            p = _sigmoid(raw)
            g = p - y
            h = p * (1.0 - p)
            tree = self._build(binned, g, h, np.arange(len(y)), depth=0)
            self._trees.append(tree)
            raw = raw + cfg.shrinkage * _predict_tree_binned(tree, binned)
        return self

    def _build(self, binned, g, h, rows, depth) -> _Node:
        cfg = self.config
        g_sum = g[rows].sum()
        h_sum = h[rows].sum()
        leaf_value = -g_sum / (h_sum + cfg.reg_lambda)
        if depth >= cfg.max_depth or len(rows) < 2:
            return _Node(value=leaf_value)
        parent_score = g_sum * g_sum / (h_sum + cfg.reg_lambda)
        best_gain = cfg.min_gain
        best: Optional[tuple[int, int]] = None
        for j in range(binned.shape[1]):
            bins = binned[rows, j]
            g_bin = np.bincount(bins, weights=g[rows], minlength=cfg.n_bins)
            h_bin = np.bincount(bins, weights=h[rows], minlength=cfg.n_bins)
            g_left = np.cumsum(g_bin)[:-1]
            h_left = np.cumsum(h_bin)[:-1]
            g_right = g_sum - g_left
            h_right = h_sum - h_left
            gain = (
                g_left * g_left / (h_left + cfg.reg_lambda)
                + g_right * g_right / (h_right + cfg.reg_lambda)
                - parent_score
            )
            best_j = int(np.argmax(gain))
            if gain[best_j] > best_gain:
                best_gain = float(gain[best_j])
                best = (j, best_j)
        if best is None:
            return _Node(value=leaf_value)
        j, cut = best
        go_left = binned[rows, j] <= cut
        left_rows, right_rows = rows[go_left], rows[~go_left]
        if len(left_rows) == 0 or len(right_rows) == 0:
            return _Node(value=leaf_value)
        return _Node(
            feature=j,
            bin_cut=cut,
            threshold=float(self._edges[j][cut]),
            left=self._build(binned, g, h, left_rows, depth + 1),
            right=self._build(binned, g, h, right_rows, depth + 1),
        )

    def predict_proba(self, features) -> np.ndarray:
        x = _as_matrix(features)
        if self._constant is not None:
            return np.full(len(x), self._constant)
        if not self._trees:
            raise TrainingError("predict before fit")
        raw = np.full(len(x), self._f0)
        for tree in self._trees:
            raw = raw + self.config.shrinkage * _predict_tree_raw(tree, x)
        return np.clip(_sigmoid(raw), PROB_CLAMP, 1.0 - PROB_CLAMP)


def _bin_columns(x: np.ndarray, n_bins: int):
    """Quantile-bin each column; returns (bin indices, per-column edges).

    bin(v) counts edges <= v, so "bin <= cut" and "v < edges[j][cut]" pick
    the same rows; inference must therefore route with strict less-than.
    """
    n, d = x.shape
    binned = np.zeros((n, d), dtype=np.int64)
    edges = []
    for j in range(d):
        qs = np.quantile(x[:, j], np.linspace(0, 1, n_bins + 1)[1:-1])
        col_edges = np.unique(qs)
        binned[:, j] = np.searchsorted(col_edges, x[:, j], side="right")
        edges.append(np.concatenate([col_edges, [np.inf]]))
    return binned, edges


def _predict_tree_binned(tree: _Node, binned: np.ndarray) -> np.ndarray:
    out = np.zeros(len(binned))
    _fill_binned(tree, binned, np.arange(len(binned)), out)
    return out


def _fill_binned(node, binned, rows, out):
    if node.is_leaf:
        out[rows] = node.value
        return
    go_left = binned[rows, node.feature] <= node.bin_cut
    _fill_binned(node.left, binned, rows[go_left], out)
    _fill_binned(node.right, binned, rows[~go_left], out)


def _predict_tree_raw(tree: _Node, x: np.ndarray) -> np.ndarray:
    out = np.zeros(len(x))
    _fill_raw(tree, x, np.arange(len(x)), out)
    return out


def _fill_raw(node, x, rows, out):
    if node.is_leaf:
        out[rows] = node.value
        return
    # strict <: bin(v) <= cut holds exactly when v < edges[feature][cut]
    go_left = x[rows, node.feature] < node.threshold
    _fill_raw(node.left, x, rows[go_left], out)
    _fill_raw(node.right, x, rows[~go_left], out)


# ---------------------------------------------------------------------------
# Meta-learners
# ---------------------------------------------------------------------------

LearnerFactory = Callable[[], BaseLearner]


class SLearner:
    """One model on features plus the treatment indicator column."""

    def __init__(self, factory: LearnerFactory = GradientBoostedTrees):
        self.factory = factory
        self._model: Optional[BaseLearner] = None

    def fit(self, features, t, outcomes) -> "SLearner":
        x = _as_matrix(features)
        t = np.asarray(t, dtype=float)
        if t.min() == t.max():
            missing = "control" if t.min() == 1.0 else "treated"
            raise TrainingError(f"single-arm data: no {missing} samples")
        self._model = self.factory()
        self._model.fit(np.column_stack([x, t]), np.asarray(outcomes, dtype=float))
        return self

    def predict_ite(self, features) -> np.ndarray:
        if self._model is None:
            raise TrainingError("predict before fit")
        x = _as_matrix(features)
        p1 = self._model.predict_proba(np.column_stack([x, np.ones(len(x))]))
        p0 = self._model.predict_proba(np.column_stack([x, np.zeros(len(x))]))
        return p1 - p0

    def fit_binary(self, ds: BinaryDataset) -> "SLearner":
        return self.fit(ds.contexts(), [s.t for s in ds], ds.outcomes())


class TLearner:
    """Separate models per arm; ITE is the probability gap."""

    def __init__(self, factory: LearnerFactory = GradientBoostedTrees):
        self.factory = factory
        self._treated: Optional[BaseLearner] = None
        self._control: Optional[BaseLearner] = None

    def fit(self, features, t, outcomes) -> "TLearner":
        x = _as_matrix(features)
        t = np.asarray(t, dtype=float)
        y = np.asarray(outcomes, dtype=float)
        if (t == 1.0).sum() == 0:
            raise TrainingError("empty arm: no treated samples")
        if (t == 0.0).sum() == 0:
            raise TrainingError("empty arm: no control samples")
        self._treated = self.factory()
        self._treated.fit(x[t == 1.0], y[t == 1.0])
        self._control = self.factory()
        self._control.fit(x[t == 0.0], y[t == 0.0])
        return self

    def predict_ite(self, features) -> np.ndarray:
        if self._treated is None:
            raise TrainingError("predict before fit")
        x = _as_matrix(features)
        return self._treated.predict_proba(x) - self._control.predict_proba(x)

    def fit_binary(self, ds: BinaryDataset) -> "TLearner":
        return self.fit(ds.contexts(), [s.t for s in ds], ds.outcomes())
