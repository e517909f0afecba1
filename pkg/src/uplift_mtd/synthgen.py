"""Synthetic populations with known treatment-effect ground truth.

Every sample carries its exact individual effect on the probability scale,
so rank metrics and estimators can be scored against truth instead of
held-out proxies. Effects combine additively on the logit scale:

    P(outcome=1) = sigmoid(baseline(x) + sum of per-act effects)
    true_ite     = sigmoid(baseline + effects) - sigmoid(baseline)

Randomness is keyed per sample as ``default_rng([seed, 0, index])`` and
model weights as ``default_rng([seed, 1, 0])``, so generation is
order-independent: sample i is identical whether generated alone, in a
different-sized population, or in parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.optimize import brentq
from scipy.special import expit

from .data import HORIZON_DAYS, Dataset, Sample, TreatmentSeq
from .errors import CalibrationError, ConfigError

BASELINE_FAMILIES = ("constant", "linear")
EFFECT_FAMILIES = ("zero", "constant", "per_category", "linear", "time_decay", "signed_ramp")
PROPENSITY_FAMILIES = ("constant", "logistic")


@dataclass(frozen=True)
class TargetMarginals:
    """Population counts to calibrate toward: arm sizes and per-arm positives."""

    total: int
    treated: int
    control_positive: int
    treated_positive: int

    @property
    def control(self) -> int:
        return self.total - self.treated

    @property
    def treated_fraction(self) -> float:
        return self.treated / self.total

    @property
    def control_rate(self) -> float:
        return self.control_positive / self.control

    @property
    def treated_rate(self) -> float:
        return self.treated_positive / self.treated

    def control_fraction_root(self, s: int) -> float:
        """Per-slot empty probability that yields the control share over s slots."""
        return (self.control / self.total) ** (1.0 / s)

    def validate(self) -> None:
        if self.total <= 0:
            raise CalibrationError("target marginals: total must be positive")
        if not 0 < self.treated < self.total:
            raise CalibrationError("target marginals: treated must lie strictly between 0 and total")
        if not 0 <= self.control_positive <= self.control:
            raise CalibrationError("target marginals: control_positive must not exceed the control count")
        if not 0 <= self.treated_positive <= self.treated:
            raise CalibrationError("target marginals: treated_positive must not exceed the treated count")
        if self.control_positive == 0 or self.control_positive == self.control:
            raise CalibrationError("target marginals: control positive rate must lie strictly in (0, 1)")
        if self.treated_positive == 0 or self.treated_positive == self.treated:
            raise CalibrationError("target marginals: treated positive rate must lie strictly in (0, 1)")


# Marginals of a public business-registry population at a one-year horizon:
# 46604 companies, 22503 with at least one adjustment act, 2281 of the 24101
# untreated and 4529 of the treated going under within the year.
REGISTRY_BASIC = TargetMarginals(total=46604, treated=22503, control_positive=2281, treated_positive=4529)


@dataclass(frozen=True)
class GeneratorSpec:
    """Recipe for one synthetic population.

    ``baseline_fn``, ``effect_fn`` and ``treatment_propensity_fn`` name
    function families (see ``*_FAMILIES``); the ``*_params`` mappings hold
    their knobs. ``target_marginals`` switches on calibration: the slot
    probability, the baseline intercept and the constant act effect are then
    solved so arm sizes and per-arm positive rates match in expectation.
    """

    n: int
    d: int = 10
    k: int = 6
    s: int = 4
    baseline_fn: str = "linear"
    baseline_params: Mapping[str, float] = field(default_factory=dict)
    effect_fn: str = "zero"
    effect_params: Mapping[str, object] = field(default_factory=dict)
    treatment_propensity_fn: str = "constant"
    propensity_params: Mapping[str, float] = field(default_factory=dict)
    target_marginals: Optional[TargetMarginals] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 0:
            raise ConfigError("n must be nonnegative")
        if min(self.d, self.k, self.s) < 1:
            raise ConfigError("d, k and s must be at least 1")
        if self.baseline_fn not in BASELINE_FAMILIES:
            raise ConfigError(f"unknown baseline family {self.baseline_fn!r}")
        if self.effect_fn not in EFFECT_FAMILIES:
            raise ConfigError(f"unknown effect family {self.effect_fn!r}")
        if self.treatment_propensity_fn not in PROPENSITY_FAMILIES:
            raise ConfigError(f"unknown propensity family {self.treatment_propensity_fn!r}")


def _param(params: Mapping, name: str, default: float) -> float:
    value = float(params.get(name, default))
    if not math.isfinite(value):
        raise ConfigError(f"parameter {name} must be finite")
    return value


_GH_NODES, _GH_WEIGHTS = hermgauss(80)


def _expect_sigmoid(mean: float, sd: float) -> float:
    """E[sigmoid(mean + sd*Z)] for standard normal Z, by Gauss-Hermite quadrature."""
    if sd == 0.0:
        return float(expit(mean))
    vals = expit(mean + sd * math.sqrt(2.0) * _GH_NODES)
    return float(np.dot(_GH_WEIGHTS, vals) / math.sqrt(math.pi))


class _Model:
    """Spec resolved to concrete numbers: weights drawn, marginals calibrated."""

    def __init__(self, spec: GeneratorSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 1, 0])

        bp = spec.baseline_params
        self.intercept = _param(bp, "intercept", -2.0)
        if spec.baseline_fn == "linear":
            scale = _param(bp, "weight_scale", 0.5)
            self.weights = scale * rng.standard_normal(spec.d) / math.sqrt(spec.d)
        else:
            self.weights = np.zeros(spec.d)
        self.noise_sd = float(np.linalg.norm(self.weights))

        ep = spec.effect_params
        self.effect_delta = _param(ep, "delta", 1.0)
        if spec.effect_fn == "per_category":
            self.category_deltas = self._resolve_category_deltas(ep, spec.k)
        else:
            self.category_deltas = np.zeros(spec.k)
        if spec.effect_fn == "linear":
            self.effect_gamma = _param(ep, "gamma", 1.0)
            direction = rng.standard_normal(spec.d)
            self.effect_direction = direction / np.linalg.norm(direction)
        else:
            self.effect_gamma = 0.0
            self.effect_direction = np.zeros(spec.d)
        self.effect_tau = _param(ep, "tau", 180.0)
        self.effect_beta = _param(ep, "beta", 2.0)

        pp = spec.propensity_params
        self.act_prob = _param(pp, "act_prob", 0.5)
        if not 0.0 <= self.act_prob <= 1.0:
            raise ConfigError("act_prob must lie in [0, 1]")
        weights = pp.get("weights")
        if weights is None:
            self.category_weights = np.full(spec.k, 1.0 / spec.k)
        else:
            w = np.asarray(weights, dtype=float)
            if w.shape != (spec.k,) or (w < 0).any() or w.sum() <= 0:
                raise ConfigError("propensity weights must be K nonnegative values with positive sum")
            self.category_weights = w / w.sum()
        if spec.treatment_propensity_fn == "logistic":
            self.propensity_bias = _param(pp, "bias", 0.0)
            self.propensity_scale = _param(pp, "scale", 1.0)
            self.max_prob = _param(pp, "max_prob", 0.9)
            direction = rng.standard_normal(spec.d)
            self.propensity_direction = direction / np.linalg.norm(direction)
        else:
            self.propensity_direction = np.zeros(spec.d)

        if spec.target_marginals is not None:
            self._calibrate(spec.target_marginals)

    @staticmethod
    def _resolve_category_deltas(params: Mapping, k: int) -> np.ndarray:
        if "deltas" in params:
            deltas = np.asarray(params["deltas"], dtype=float)
            if deltas.shape != (k,) or not np.isfinite(deltas).all():
                raise ConfigError("per_category deltas must be K finite values")
            return deltas
        on = params.get("on", ())
        deltas = np.full(k, _param(params, "delta_off", 0.0))
        for cat in on:
            if not 0 <= int(cat) < k:
                raise ConfigError(f"per_category 'on' index {cat} outside [0, {k})")
            deltas[int(cat)] = _param(params, "delta_on", 1.0)
        return deltas

    # -- calibration ------------------------------------------------------

    def _calibrate(self, tm: TargetMarginals) -> None:
        tm.validate()
        if self.spec.treatment_propensity_fn != "constant":
            raise CalibrationError("calibration requires the constant propensity family")
        if self.spec.effect_fn != "constant":
            raise CalibrationError("calibration requires the constant effect family")

        # Control iff all S slots stay empty: (1 - act_prob)^S = control share.
        self.act_prob = 1.0 - tm.control_fraction_root(self.spec.s)

        try:
            self.intercept = brentq(
                lambda b: _expect_sigmoid(b, self.noise_sd) - tm.control_rate, -40.0, 40.0, xtol=1e-13
            )
        except ValueError as exc:
            raise CalibrationError(f"control positive rate {tm.control_rate:.6f} unreachable") from exc

        s, tau = self.spec.s, self.act_prob
        pmf = np.array([math.comb(s, m) * tau**m * (1 - tau) ** (s - m) for m in range(s + 1)])
        cond = pmf[1:] / pmf[1:].sum()

        def treated_rate(delta: float) -> float:
            rates = [_expect_sigmoid(self.intercept + m * delta, self.noise_sd) for m in range(1, s + 1)]
            return float(np.dot(cond, rates))

        try:
            self.effect_delta = brentq(lambda dl: treated_rate(dl) - tm.treated_rate, -40.0, 40.0, xtol=1e-13)
        except ValueError as exc:
            raise CalibrationError(f"treated positive rate {tm.treated_rate:.6f} unreachable") from exc

    # -- pointwise pieces --------------------------------------------------

    def baseline_logit(self, x: np.ndarray) -> float:
        return float(self.intercept + self.weights @ x)

    def effect_logit(self, x: np.ndarray, cat: int, ts: float) -> float:
        fam = self.spec.effect_fn
        if fam == "zero":
            return 0.0
        if fam == "constant":
            return self.effect_delta
        if fam == "per_category":
            return float(self.category_deltas[cat])
        if fam == "linear":
            return self.effect_delta + self.effect_gamma * float(self.effect_direction @ x)
        if fam == "time_decay":
            return self.effect_delta * math.exp(-ts / self.effect_tau)
        # signed_ramp: even categories push up, odd push down, both fading
        # linearly from +1 at day 0 to -1 at the horizon. The sum over acts
        # then depends on which category came first and by how much.
        sign = 1.0 if cat % 2 == 0 else -1.0
        return sign * self.effect_beta * (1.0 - 2.0 * ts / HORIZON_DAYS)

    def slot_probs(self, x: np.ndarray) -> np.ndarray:
        """Per-category occurrence probabilities for one slot; sum <= 1."""
        if self.spec.treatment_propensity_fn == "constant":
            total = self.act_prob
        else:
            logit = self.propensity_bias + self.propensity_scale * float(self.propensity_direction @ x)
            total = self.max_prob * float(expit(logit))
        return total * self.category_weights


def _draw_sample(model: _Model, index: int) -> Sample:
    """One sample from its own stream; draw order: context, slots, outcome."""
    spec = model.spec
    rng = np.random.default_rng([spec.seed, 0, index])
    x = rng.standard_normal(spec.d)

    acts: list[tuple[int, float]] = []
    for _ in range(spec.s):
        probs = model.slot_probs(x)
        u = rng.random()
        if u < probs.sum():
            cat = int(np.searchsorted(np.cumsum(probs), u, side="right"))
            acts.append((cat, rng.uniform(0.0, HORIZON_DAYS)))

    base = model.baseline_logit(x)
    effect = math.fsum(model.effect_logit(x, cat, ts) for cat, ts in acts)
    p_treated = float(expit(base + effect))
    true_ite = p_treated - float(expit(base)) if acts else 0.0
    outcome = int(rng.random() < p_treated)
    return Sample(
        id=f"g{index:07d}",
        context=x,
        treatments=TreatmentSeq.from_acts(acts, spec.k, spec.s),
        outcome=outcome,
        true_ite=true_ite,
    )


def generate(spec: GeneratorSpec) -> Dataset:
    """Draw a population; every sample carries its exact probability-scale effect."""
    model = _Model(spec)
    samples = tuple(_draw_sample(model, i) for i in range(spec.n))
    dataset = Dataset(d=spec.d, k=spec.k, s=spec.s, samples=samples, label=_label(spec))
    dataset.validate()
    return dataset


def _label(spec: GeneratorSpec) -> str:
    if spec.target_marginals is not None:
        return "calibrated"
    return spec.effect_fn


# -- ready-made specs ------------------------------------------------------


def null_spec(n: int, seed: int = 0) -> GeneratorSpec:
    """Randomized arms, zero effect everywhere: any apparent uplift is noise."""
    return GeneratorSpec(
        n=n,
        d=6,
        k=3,
        s=3,
        baseline_fn="linear",
        baseline_params={"intercept": -1.8, "weight_scale": 0.7},
        effect_fn="zero",
        treatment_propensity_fn="constant",
        propensity_params={"act_prob": 0.25},
        seed=seed,
    )


def linear_rct_spec(n: int, seed: int = 0) -> GeneratorSpec:
    """Single binary treatment, effect linear in context, constant propensity."""
    return GeneratorSpec(
        n=n,
        d=5,
        k=1,
        s=1,
        baseline_fn="linear",
        baseline_params={"intercept": -1.2, "weight_scale": 0.8},
        effect_fn="linear",
        effect_params={"delta": 1.0, "gamma": 1.5},
        treatment_propensity_fn="constant",
        propensity_params={"act_prob": 0.5},
        seed=seed,
    )


def info_effect_spec(n: int, seed: int = 0) -> GeneratorSpec:
    """Six categories, only the middle third (indices 2,3) carries any effect.

    Tuned so each binarized view keeps both arms well populated (act_prob
    0.3 over four slots leaves about a quarter of samples untreated) and the
    baseline spread is wide enough that true uplift varies measurably with
    context; both matter for stable rank-metric comparisons.
    """
    return GeneratorSpec(
        n=n,
        d=8,
        k=6,
        s=4,
        baseline_fn="linear",
        baseline_params={"intercept": -2.0, "weight_scale": 1.0},
        effect_fn="per_category",
        effect_params={"on": (2, 3), "delta_on": 2.0, "delta_off": 0.0},
        treatment_propensity_fn="constant",
        propensity_params={"act_prob": 0.3},
        seed=seed,
    )


def registry_spec(n: int = REGISTRY_BASIC.total, seed: int = 0) -> GeneratorSpec:
    """Calibrated to the registry marginals: arm split and per-arm positive rates."""
    return GeneratorSpec(
        n=n,
        d=10,
        k=6,
        s=4,
        baseline_fn="linear",
        baseline_params={"weight_scale": 0.5},
        effect_fn="constant",
        treatment_propensity_fn="constant",
        target_marginals=REGISTRY_BASIC,
        seed=seed,
    )


def confounded_spec(n: int, seed: int = 0) -> GeneratorSpec:
    """Treatment probability rises with the same context direction that drives risk."""
    return GeneratorSpec(
        n=n,
        d=6,
        k=2,
        s=3,
        baseline_fn="linear",
        baseline_params={"intercept": -1.5, "weight_scale": 0.8},
        effect_fn="constant",
        effect_params={"delta": 0.8},
        treatment_propensity_fn="logistic",
        propensity_params={"bias": -0.5, "scale": 1.5, "max_prob": 0.9},
        seed=seed,
    )


# -- the timing benchmark ---------------------------------------------------

_TS_DIM = 6
_TS_INTERCEPT = -2.2
_TS_WEIGHT_SCALE = 0.4
_TS_BETA = 2.0


def _ramp(cat: int, ts: float) -> float:
    sign = 1.0 if cat % 2 == 0 else -1.0
    return sign * _TS_BETA * (1.0 - 2.0 * ts / HORIZON_DAYS)


def make_time_sensitive_suite(n: int, seed: int = 0) -> Dataset:
    """Benchmark where effects live in act order and timing, not presence.

    Three strata, deterministic sizes: twin pairs (two samples sharing
    context and the same two timestamps, categories 0 and 1 in opposite
    order, so their collapsed views are identical while their true effects
    have opposite signs), singles (one act whose effect fades and flips sign
    across the year), and controls. Any model reading only presence vectors
    sees zero expected effect in every stratum.
    """
    if n < 0:
        raise ConfigError("n must be nonnegative")
    n_pair_units = n // 5
    n_singles = int(0.3 * n + 0.5)
    n_controls = n - 2 * n_pair_units - n_singles

    weights = _TS_WEIGHT_SCALE * np.random.default_rng([seed, 1, 0]).standard_normal(_TS_DIM) / math.sqrt(_TS_DIM)

    def baseline(x: np.ndarray) -> float:
        return _TS_INTERCEPT + float(weights @ x)

    samples = []
    unit = 0
    for _ in range(n_controls):
        rng = np.random.default_rng([seed, 0, unit])
        x = rng.standard_normal(_TS_DIM)
        y = int(rng.random() < expit(baseline(x)))
        samples.append(Sample(f"c{unit:06d}", x, TreatmentSeq.empty(2, 2), y, 0.0))
        unit += 1
    for _ in range(n_singles):
        rng = np.random.default_rng([seed, 0, unit])
        x = rng.standard_normal(_TS_DIM)
        cat = int(rng.integers(2))
        ts = rng.uniform(0.0, HORIZON_DAYS)
        base = baseline(x)
        ite = float(expit(base + _ramp(cat, ts)) - expit(base))
        y = int(rng.random() < expit(base + _ramp(cat, ts)))
        samples.append(Sample(f"s{unit:06d}", x, TreatmentSeq.from_acts([(cat, ts)], 2, 2), y, ite))
        unit += 1
    for _ in range(n_pair_units):
        rng = np.random.default_rng([seed, 0, unit])
        x = rng.standard_normal(_TS_DIM)
        t0, t1 = sorted(rng.uniform(0.0, HORIZON_DAYS, size=2))
        base = baseline(x)
        for tag, acts in (("a", [(0, t0), (1, t1)]), ("b", [(1, t0), (0, t1)])):
            effect = _ramp(acts[0][0], acts[0][1]) + _ramp(acts[1][0], acts[1][1])
            ite = float(expit(base + effect) - expit(base))
            y = int(rng.random() < expit(base + effect))
            samples.append(Sample(f"p{unit:06d}{tag}", x, TreatmentSeq.from_acts(acts, 2, 2), y, ite))
        unit += 1

    dataset = Dataset(d=_TS_DIM, k=2, s=2, samples=tuple(samples), label="time-sensitive")
    dataset.validate()
    return dataset


# -- preset registry (used by the gen-data command) -------------------------

PRESET_DEFAULT_N = {
    "table2-basic": REGISTRY_BASIC.total,
    "null": 5000,
    "linear-rct": 20000,
    "info-effect": 10000,
    "confounded": 10000,
    "time-sensitive": 20000,
}

PRESETS: dict[str, Callable[[int, int], Dataset]] = {
    "table2-basic": lambda n, seed: generate(registry_spec(n, seed)),
    "null": lambda n, seed: generate(null_spec(n, seed)),
    "linear-rct": lambda n, seed: generate(linear_rct_spec(n, seed)),
    "info-effect": lambda n, seed: generate(info_effect_spec(n, seed)),
    "confounded": lambda n, seed: generate(confounded_spec(n, seed)),
    "time-sensitive": make_time_sensitive_suite,
}


def preset(name: str, n: Optional[int] = None, seed: int = 0) -> Dataset:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name](PRESET_DEFAULT_N[name] if n is None else n, seed)


# the time-sensitive suite is composed sample by sample, so it has no single
# GeneratorSpec; everything else can be handed out as a spec for re-seeding
SPEC_PRESETS: dict[str, Callable[[int, int], GeneratorSpec]] = {
    "table2-basic": registry_spec,
    "null": null_spec,
    "linear-rct": linear_rct_spec,
    "info-effect": info_effect_spec,
    "confounded": confounded_spec,
}


def preset_spec(name: str, n: Optional[int] = None, seed: int = 0) -> GeneratorSpec:
    if name not in SPEC_PRESETS:
        raise ConfigError(f"unknown generator preset {name!r}; choose from {sorted(SPEC_PRESETS)}")
    return SPEC_PRESETS[name](PRESET_DEFAULT_N[name] if n is None else n, seed)
