"""Rank-based uplift evaluation: average uplift, uplift@k, Qini, AUUC.

All metrics consume a set of scored samples: a predicted uplift, an arm flag
(treated/control) and the observed binary outcome. Exact curve conventions
are frozen in docs/metrics.md and pinned by golden tests; the short version:

* Samples are ranked by predicted uplift, descending, ties broken by the
  original index (stable).
* Qini gain at prefix P:  Y_T(P) - Y_C(P) * N_T(P) / N_C(P), with the second
  term taken as 0 while the prefix holds no controls.
* Uplift-curve gain at prefix P of size i:  i * (r_T(P) - r_C(P)), where an
  arm absent from the prefix contributes rate 0.
* Curve areas are trapezoidal over the targeted fraction in [0, 1].
* Normalized scores subtract the random diagonal and divide by the optimum
  ordering's headroom:  (A_model - A_diag) / (A_opt - A_diag).  The optimum
  orders by (outcome if treated else -outcome), descending, controls ahead
  of treated on ties; the tie rule keeps the optimum independent of input
  order and front-loads the uplift curve within tied blocks.

A normalized score is NaN when the optimum has no headroom over the diagonal
(flat labels); callers that need to distinguish use ``math.isnan``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import SchemaError, SizeError

__all__ = [
    "ScoredSample",
    "Scored",
    "Curve",
    "UpliftAtK",
    "EvalReport",
    "average_uplift",
    "uplift_at_k",
    "qini_curve",
    "qini_score",
    "uplift_curve",
    "auuc",
    "optimum_order",
    "evaluate_scores",
    "curve_to_csv",
    "curves_to_svg",
]


@dataclass(frozen=True)
class ScoredSample:
    predicted_uplift: float
    treated: bool
    outcome: int


@dataclass(frozen=True)
class Scored:
    """Column view of scored samples, validated once."""

    scores: np.ndarray
    outcomes: np.ndarray
    treated: np.ndarray

    @staticmethod
    def from_arrays(scores, outcomes, treated) -> "Scored":
        scores = np.asarray(scores, dtype=float)
        outcomes = np.asarray(outcomes, dtype=float)
        treated = np.asarray(treated, dtype=bool)
        if not scores.shape == outcomes.shape == treated.shape or scores.ndim != 1:
            raise SchemaError("scores/outcomes/treated must be equal-length vectors")
        if not np.isfinite(scores).all():
            raise SchemaError("non-finite prediction score")
        if not np.isin(outcomes, (0.0, 1.0)).all():
            raise SchemaError("outcomes must be 0 or 1")
        return Scored(scores, outcomes, treated)

    @staticmethod
    def from_samples(samples: Sequence[ScoredSample]) -> "Scored":
        return Scored.from_arrays(
            [s.predicted_uplift for s in samples],
            [s.outcome for s in samples],
            [s.treated for s in samples],
        )

    @staticmethod
    def coerce(scored: "ScoredInput") -> "Scored":
        if isinstance(scored, Scored):
            return scored
        return Scored.from_samples(scored)

    def __len__(self) -> int:
        return len(self.scores)


ScoredInput = Union[Scored, Sequence[ScoredSample]]


@dataclass(frozen=True)
class Curve:
    """Gain curve over targeted fraction; first point (0,0), last fraction 1."""

    fractions: np.ndarray
    gains: np.ndarray
    area: float

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fractions.tolist(), self.gains.tolist()))


@dataclass(frozen=True)
class UpliftAtK:
    """Treated-minus-control outcome rate within the top-k slice.

    ``value`` is NaN when the slice misses an arm; ``reason`` says which.
    """

    value: float
    k: float
    n_slice: int
    n_treated: int
    n_control: int
    reason: Optional[str] = None

    @property
    def defined(self) -> bool:
        return self.reason is None


@dataclass(frozen=True)
class EvalReport:
    """Every headline metric for one scorer on one evaluation set."""

    n: int
    n_treated: int
    n_control: int
    average_uplift: float
    uplift_at_30: UpliftAtK
    qini: float
    auuc: float
    qini_points: Curve
    uplift_points: Curve


def _require_both_arms(sc: Scored) -> None:
    if len(sc) == 0:
        raise SizeError("no scored samples")
    n_t = int(sc.treated.sum())
    if n_t == 0:
        raise SizeError("treated arm is empty")
    if n_t == len(sc):
        raise SizeError("control arm is empty")


def _rank_order(sc: Scored) -> np.ndarray:
    """Indices by descending score; ties keep original order."""
    return np.argsort(-sc.scores, kind="stable")


def optimum_order(sc: Scored) -> np.ndarray:
    """Best achievable targeting order given labels and arms.

    Sorts on (outcome if treated else -outcome) descending; ties put controls
    before treated, so the result is a function of labels and arms alone.
    """
    key = np.where(sc.treated, sc.outcomes, -sc.outcomes)
    return np.lexsort((sc.treated.astype(int), -key))


def _qini_gains(sc: Scored, order: np.ndarray) -> np.ndarray:
    y = sc.outcomes[order]
    t = sc.treated[order].astype(float)
    y_t = np.cumsum(y * t)
    y_c = np.cumsum(y * (1.0 - t))
    n_t = np.cumsum(t)
    n_c = np.cumsum(1.0 - t)
    ratio = np.divide(n_t, n_c, out=np.zeros_like(n_t), where=n_c > 0)
    gains = y_t - y_c * ratio
    return np.concatenate([[0.0], gains])


def _uplift_gains(sc: Scored, order: np.ndarray) -> np.ndarray:
    y = sc.outcomes[order]
    t = sc.treated[order].astype(float)
    y_t = np.cumsum(y * t)
    y_c = np.cumsum(y * (1.0 - t))
    n_t = np.cumsum(t)
    n_c = np.cumsum(1.0 - t)
    r_t = np.divide(y_t, n_t, out=np.zeros_like(y_t), where=n_t > 0)
    r_c = np.divide(y_c, n_c, out=np.zeros_like(y_c), where=n_c > 0)
    i = np.arange(1, len(y) + 1, dtype=float)
    return np.concatenate([[0.0], i * (r_t - r_c)])


def _curve(gains: np.ndarray, n: int) -> Curve:
    fractions = np.arange(n + 1, dtype=float) / n
    area = float(np.trapezoid(gains, fractions))
    return Curve(fractions, gains, area)


# Headroom below this is flat for any realistic label set; guarding here
# (rather than on exact zero) keeps the NaN decision stable under float
# summation order.
_FLAT_HEADROOM = 1e-9


def _normalized(sc: Scored, gain_fn) -> tuple[Curve, float]:
    model = _curve(gain_fn(sc, _rank_order(sc)), len(sc))
    opt = _curve(gain_fn(sc, optimum_order(sc)), len(sc))
    diag_area = model.gains[-1] / 2.0
    denom = opt.area - diag_area
    if abs(denom) < _FLAT_HEADROOM:
        return model, float("nan")
    return model, (model.area - diag_area) / denom


def average_uplift(scored: ScoredInput) -> float:
    """Treated-minus-control mean outcome, ignoring scores."""
    sc = Scored.coerce(scored)
    _require_both_arms(sc)
    return float(sc.outcomes[sc.treated].mean() - sc.outcomes[~sc.treated].mean())


def uplift_at_k(scored: ScoredInput, k: float = 0.30) -> UpliftAtK:
    """Average uplift within the top ceil(k*N) samples by predicted uplift."""
    sc = Scored.coerce(scored)
    _require_both_arms(sc)
    if not 0.0 < k <= 1.0:
        raise SizeError(f"k={k} outside (0, 1]")
    m = math.ceil(k * len(sc))
    top = _rank_order(sc)[:m]
    t = sc.treated[top]
    n_t, n_c = int(t.sum()), int((~t).sum())
    if n_t == 0 or n_c == 0:
        missing = "treated" if n_t == 0 else "control"
        return UpliftAtK(float("nan"), k, m, n_t, n_c, reason=f"no {missing} samples in top slice")
    y = sc.outcomes[top]
    return UpliftAtK(float(y[t].mean() - y[~t].mean()), k, m, n_t, n_c)


def qini_curve(scored: ScoredInput) -> Curve:
    sc = Scored.coerce(scored)
    _require_both_arms(sc)
    return _curve(_qini_gains(sc, _rank_order(sc)), len(sc))


def qini_score(scored: ScoredInput) -> float:
    """Diagonal-adjusted Qini area over the optimum's headroom; 1 is perfect."""
    sc = Scored.coerce(scored)
    _require_both_arms(sc)
    return _normalized(sc, _qini_gains)[1]


def uplift_curve(scored: ScoredInput) -> Curve:
    sc = Scored.coerce(scored)
    _require_both_arms(sc)
    return _curve(_uplift_gains(sc, _rank_order(sc)), len(sc))


def auuc(scored: ScoredInput) -> float:
    """Normalized area under the uplift curve; diagonal-adjusted like Qini."""
    sc = Scored.coerce(scored)
    _require_both_arms(sc)
    return _normalized(sc, _uplift_gains)[1]


def evaluate_scores(scored: ScoredInput) -> EvalReport:
    sc = Scored.coerce(scored)
    _require_both_arms(sc)
    return EvalReport(
        n=len(sc),
        n_treated=int(sc.treated.sum()),
        n_control=int((~sc.treated).sum()),
        average_uplift=average_uplift(sc),
        uplift_at_30=uplift_at_k(sc, 0.30),
        qini=qini_score(sc),
        auuc=auuc(sc),
        qini_points=qini_curve(sc),
        uplift_points=uplift_curve(sc),
    )


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------


def curve_to_csv(curve: Curve) -> str:
    lines = ["fraction,gain"]
    for f, g in zip(curve.fractions, curve.gains):
        lines.append(f"{repr(float(f))},{repr(float(g))}")
    return "\n".join(lines) + "\n"


def _svg_path(curve: Curve, x0, y0, w, h, lo, hi) -> str:
    span = (hi - lo) or 1.0
    pts = []
    for f, g in zip(curve.fractions, curve.gains):
        x = x0 + f * w
        y = y0 + h - (g - lo) / span * h
        pts.append(f"{x:.2f},{y:.2f}")
    return " ".join(pts)


def curves_to_svg(curves: dict[str, Curve], title: str = "gain curves") -> str:
    """Standalone SVG line chart; deterministic output for golden tests."""
    width, height, margin = 640, 400, 50
    w, h = width - 2 * margin, height - 2 * margin
    all_gains = np.concatenate([c.gains for c in curves.values()]) if curves else np.zeros(1)
    lo = min(0.0, float(all_gains.min()))
    hi = max(1e-12, float(all_gains.max()))
    palette = ["#1f6fb2", "#d1495b", "#3a7d44", "#8d6a9f", "#c77f2e", "#5b5b5b"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="15">{title}</text>',
    ]
    zero_y = margin + h - (0.0 - lo) / ((hi - lo) or 1.0) * h
    parts.append(
        f'<line x1="{margin}" y1="{zero_y:.2f}" x2="{margin + w}" y2="{zero_y:.2f}" '
        'stroke="#999" stroke-dasharray="4 3"/>'
    )
    for i, (name, curve) in enumerate(sorted(curves.items())):
        color = palette[i % len(palette)]
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{_svg_path(curve, margin, margin, w, h, lo, hi)}"/>'
        )
        parts.append(
            f'<text x="{margin + 8}" y="{margin + 16 + 16 * i}" font-family="sans-serif" '
            f'font-size="12" fill="{color}">{name}</text>'
        )
    parts.append(
        f'<text x="{width / 2:.0f}" y="{height - 10}" text-anchor="middle" '
        'font-family="sans-serif" font-size="12">fraction targeted</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
