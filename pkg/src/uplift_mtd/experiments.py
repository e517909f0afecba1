"""Reproducible experiment runners for the bundled synthetic suites.

Two studies, each producing a metric table plus per-seed gain curves:

* ``run_rq1`` asks which treatment binarization carries the effect signal.
  A generated dataset is reduced to a scalar treatment four ways (any act,
  then one flag per category group) and three uplift models are trained and
  scored on every view.
* ``run_rq2`` asks whether treatment timing matters. On the time-sensitive
  suite, binarized baselines and a timing-blind network ablation compete
  against the full sequence model.

Artifacts land under a content-addressed run directory: the manifest text
that describes the inputs is hashed and the digest names the folder, so the
same inputs always map to the same place and a re-run must reproduce the
same bytes. Aggregation stops at seed-wise mean and sample stdev.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .baselines import SLearner, TLearner
from .data import (
    BINARIZE_MODES,
    BinaryDataset,
    Dataset,
    SplitSpec,
    binarize,
    collapse_multi,
    split,
)
from .errors import ConfigError
from .metrics import EvalReport, Scored, curve_to_csv, curves_to_svg, evaluate_scores
from .mtdnet import MtdNetModel, TrainConfig, predict_ite, train
from .synthgen import GeneratorSpec, generate, make_time_sensitive_suite

__all__ = [
    "RQ1_MODELS",
    "RQ2_ROWS",
    "METRICS",
    "DEFAULT_RQ1_CONFIG",
    "DEFAULT_RQ2_CONFIG",
    "CellStat",
    "Rq1Result",
    "Rq2Result",
    "run_rq1",
    "run_rq2",
]

RQ1_MODELS = ("s-learner", "t-learner", "mtdnet")
RQ2_ROWS = ("s-learner-bi", "t-learner-bi", "mtdnet-multi", "mtdnet-original")
METRICS = ("uplift_at_30", "auuc", "qini")

# Experiment defaults favor dependable convergence inside a short epoch
# budget over grid fidelity; hyperparameter search stays in mtdnet.grid_search.
DEFAULT_RQ1_CONFIG = TrainConfig(
    batch_size=128,
    epochs=30,
    learning_rate=1e-3,
    l2=1e-5,
    hidden_size=32,
    output_size=16,
    patience=8,
)
DEFAULT_RQ2_CONFIG = TrainConfig(
    batch_size=128,
    epochs=40,
    learning_rate=1e-3,
    l2=1e-5,
    hidden_size=32,
    output_size=16,
    patience=8,
)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellStat:
    """Per-seed metric values with their mean and sample stdev."""

    values: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def stdev(self) -> float:
        if len(self.values) < 2:
            return 0.0
        return float(np.std(self.values, ddof=1))

    def pretty(self) -> str:
        return f"{self.mean:.4f} +/- {self.stdev:.4f}"


def _metric_value(report: EvalReport, name: str) -> float:
    if name == "uplift_at_30":
        return float(report.uplift_at_30.value)
    if name == "auuc":
        return float(report.auuc)
    if name == "qini":
        return float(report.qini)
    raise ConfigError(f"unknown metric {name!r}; choose from {METRICS}")


def _csv_table(
    key_headers: Sequence[str],
    rows: Sequence[tuple[tuple[str, ...], dict[str, CellStat]]],
    metrics: Sequence[str],
    seeds: Sequence[int],
) -> str:
    header = [*key_headers, "metric", "mean", "stdev", *(f"seed_{s}" for s in seeds)]
    lines = [",".join(header)]
    for key, per_metric in rows:
        for metric in metrics:
            st = per_metric[metric]
            cells = [*key, metric, repr(st.mean), repr(st.stdev)]
            cells.extend(repr(v) for v in st.values)
            lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _text_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    def fmt(cells: Sequence[str]) -> str:
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Content addressing
# ---------------------------------------------------------------------------


def _canon(obj) -> str:
    """Deterministic one-line rendering used for manifests and hashing."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        items = sorted(dataclasses.asdict(obj).items())
        body = ", ".join(f"{k}={_canon(v)}" for k, v in items)
        return f"{obj.__class__.__name__}({body})"
    if isinstance(obj, dict):
        body = ", ".join(f"{k!r}: {_canon(obj[k])}" for k in sorted(obj))
        return "{" + body + "}"
    if isinstance(obj, (list, tuple)):
        return "(" + ", ".join(_canon(v) for v in obj) + ")"
    return repr(obj)


def _make_run_dir(out_dir: Union[str, Path], name: str, manifest: str) -> Path:
    digest = hashlib.sha256(manifest.encode("utf-8")).hexdigest()[:12]
    run_dir = Path(out_dir) / f"{name}-{digest}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "manifest.txt").write_text(manifest, encoding="utf-8")
    return run_dir


def _write_report_curves(folder: Path, stem: str, report: EvalReport) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    (folder / f"{stem}-qini.csv").write_text(curve_to_csv(report.qini_points), encoding="utf-8")
    (folder / f"{stem}-uplift.csv").write_text(curve_to_csv(report.uplift_points), encoding="utf-8")


# ---------------------------------------------------------------------------
# Model fitting
# ---------------------------------------------------------------------------


def _train_mtd(train_seq: Dataset, config: TrainConfig, use_timestamps: bool = True) -> MtdNetModel:
    model = MtdNetModel(
        train_seq.d,
        train_seq.k,
        train_seq.s,
        config.hidden_size,
        config.output_size,
        seed=config.seed,
        attention_query=config.attention_query,
        use_timestamps=use_timestamps,
    )
    train(model, train_seq, config)
    return model


def _binary_scores(
    name: str, train_bin: BinaryDataset, test_bin: BinaryDataset, config: TrainConfig
) -> np.ndarray:
    if name == "s-learner":
        return SLearner().fit_binary(train_bin).predict_ite(test_bin.contexts())
    if name == "t-learner":
        return TLearner().fit_binary(train_bin).predict_ite(test_bin.contexts())
    if name == "mtdnet":
        model = _train_mtd(train_bin.to_sequence(), config)
        return predict_ite(model, test_bin.to_sequence())
    raise ConfigError(f"unknown model {name!r}; choose from {RQ1_MODELS}")


# ---------------------------------------------------------------------------
# RQ1: which binarization carries the effect signal
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rq1Result:
    """Binarization-mode comparison: cells keyed by (mode, model)."""

    modes: tuple[str, ...]
    models: tuple[str, ...]
    metrics: tuple[str, ...]
    seeds: tuple[int, ...]
    cells: dict[tuple[str, str], dict[str, CellStat]]
    run_dir: Optional[Path] = None

    def table_csv(self) -> str:
        rows = [((mode, model), self.cells[(mode, model)]) for mode in self.modes for model in self.models]
        return _csv_table(("mode", "model"), rows, self.metrics, self.seeds)

    def table_text(self) -> str:
        rows = []
        for mode in self.modes:
            for model in self.models:
                per = self.cells[(mode, model)]
                rows.append([mode, model, *(per[m].pretty() for m in self.metrics)])
        body = _text_table(["mode", "model", *self.metrics], rows)
        seeds = ",".join(str(s) for s in self.seeds)
        return f"binarization comparison over seeds {seeds}\n\n{body}"

    def top_mode_count(self, mode: str, metric: str = "qini") -> int:
        """Seeds where every model ranks `mode` strictly highest on the metric."""
        count = 0
        for i in range(len(self.seeds)):
            ok = True
            for model in self.models:
                value = self.cells[(mode, model)][metric].values[i]
                rest = (
                    self.cells[(other, model)][metric].values[i]
                    for other in self.modes
                    if other != mode
                )
                if not all(value > r for r in rest):
                    ok = False
                    break
            count += ok
        return count


def _manifest_rq1(
    spec: GeneratorSpec,
    seeds: Sequence[int],
    models: Sequence[str],
    modes: Sequence[str],
    config: TrainConfig,
    train_fraction: float,
) -> str:
    lines = [
        "experiment: rq1",
        f"generator: {_canon(spec)}",
        f"train_fraction: {train_fraction!r}",
        f"seeds: {','.join(str(s) for s in seeds)}",
        f"modes: {','.join(modes)}",
        f"models: {','.join(models)}",
        f"mtdnet: {_canon(config)}",
    ]
    return "\n".join(lines) + "\n"


def run_rq1(
    generator_spec: GeneratorSpec,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    models: Sequence[str] = RQ1_MODELS,
    modes: Sequence[str] = BINARIZE_MODES,
    mtd_config: TrainConfig = DEFAULT_RQ1_CONFIG,
    train_fraction: float = 0.7,
    out_dir: Optional[Union[str, Path]] = None,
) -> Rq1Result:
    """Train every model on every binarized view, one replicate per seed.

    Each seed regenerates the dataset (the generator seed is replaced) and
    re-splits it, so seeds are independent end-to-end replicates. The network
    trains with ``mtd_config`` but its weight seed follows the data seed.
    """
    seeds = tuple(int(s) for s in seeds)
    models = tuple(models)
    modes = tuple(modes)
    if not seeds:
        raise ConfigError("need at least one seed")
    for name in models:
        if name not in RQ1_MODELS:
            raise ConfigError(f"unknown model {name!r}; choose from {RQ1_MODELS}")
    for mode in modes:
        if mode not in BINARIZE_MODES:
            raise ConfigError(f"unknown binarize mode {mode!r}; choose from {BINARIZE_MODES}")

    manifest = _manifest_rq1(generator_spec, seeds, models, modes, mtd_config, train_fraction)
    run_dir = _make_run_dir(out_dir, "rq1", manifest) if out_dir is not None else None

    reports: dict[tuple[int, str, str], EvalReport] = {}
    for seed in seeds:
        data = generate(dataclasses.replace(generator_spec, seed=seed))
        train_seq, test_seq = split(data, SplitSpec(train_fraction, seed=seed))
        config = dataclasses.replace(mtd_config, seed=mtd_config.seed + seed)
        for mode in modes:
            train_bin = binarize(train_seq, mode)
            test_bin = binarize(test_seq, mode)
            outcomes = test_bin.outcomes()
            treated = np.array([smp.t for smp in test_bin], dtype=bool)
            curves = {}
            for name in models:
                scores = _binary_scores(name, train_bin, test_bin, config)
                report = evaluate_scores(Scored.from_arrays(scores, outcomes, treated))
                reports[(seed, mode, name)] = report
                curves[name] = report.qini_points
                if run_dir is not None:
                    _write_report_curves(run_dir / "curves" / f"seed{seed}" / mode, name, report)
            if run_dir is not None:
                svg = curves_to_svg(curves, title=f"qini gains, {mode}, seed {seed}")
                (run_dir / "curves" / f"seed{seed}" / f"{mode}.svg").write_text(svg, encoding="utf-8")

    cells = {
        (mode, name): {
            metric: CellStat(tuple(_metric_value(reports[(s, mode, name)], metric) for s in seeds))
            for metric in METRICS
        }
        for mode in modes
        for name in models
    }
    result = Rq1Result(modes, models, METRICS, seeds, cells, run_dir)
    if run_dir is not None:
        (run_dir / "table.csv").write_text(result.table_csv(), encoding="utf-8")
        (run_dir / "table.txt").write_text(result.table_text(), encoding="utf-8")
    return result


# ---------------------------------------------------------------------------
# RQ2: does timing matter
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rq2Result:
    """Timing study: cells keyed by model row name."""

    rows: tuple[str, ...]
    metrics: tuple[str, ...]
    seeds: tuple[int, ...]
    cells: dict[str, dict[str, CellStat]]
    run_dir: Optional[Path] = None

    def table_csv(self) -> str:
        rows = [((name,), self.cells[name]) for name in self.rows]
        return _csv_table(("model",), rows, self.metrics, self.seeds)

    def table_text(self) -> str:
        rows = [
            [name, *(self.cells[name][m].pretty() for m in self.metrics)]
            for name in self.rows
        ]
        body = _text_table(["model", *self.metrics], rows)
        seeds = ",".join(str(s) for s in self.seeds)
        return f"timing study over seeds {seeds}\n\n{body}"

    def seed_wins(
        self, challenger: str = "mtdnet-original", metrics: Sequence[str] = ("qini", "auuc")
    ) -> int:
        """Seeds where the challenger strictly beats every other row on all metrics."""
        wins = 0
        for i in range(len(self.seeds)):
            ok = all(
                self.cells[challenger][m].values[i] > self.cells[other][m].values[i]
                for other in self.rows
                if other != challenger
                for m in metrics
            )
            wins += ok
        return wins


def _manifest_rq2(n: int, seeds: Sequence[int], config: TrainConfig, train_fraction: float) -> str:
    lines = [
        "experiment: rq2",
        f"suite: time-sensitive n={n}",
        f"train_fraction: {train_fraction!r}",
        f"seeds: {','.join(str(s) for s in seeds)}",
        f"rows: {','.join(RQ2_ROWS)}",
        f"mtdnet: {_canon(config)}",
    ]
    return "\n".join(lines) + "\n"


def run_rq2(
    n: int = 20000,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    mtd_config: TrainConfig = DEFAULT_RQ2_CONFIG,
    train_fraction: float = 0.7,
    out_dir: Optional[Union[str, Path]] = None,
) -> Rq2Result:
    """Compare timing-aware and timing-blind models on the time-sensitive suite.

    Rows fit to the same train split and score the same test samples:

    * ``s-learner-bi`` / ``t-learner-bi``: any-act binarization, context only.
    * ``mtdnet-multi``: the network on the collapsed per-category presence
      view with the timestamp channel zeroed. Collapsing is what removes the
      timing signal; zeroing the channel alone would leave the step order,
      which encodes the same information.
    * ``mtdnet-original``: the network on the full timed sequences.

    Evaluation uses the any-act treated flag for every row, so the four score
    vectors are ranked against identical labels.
    """
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ConfigError("need at least one seed")

    manifest = _manifest_rq2(n, seeds, mtd_config, train_fraction)
    run_dir = _make_run_dir(out_dir, "rq2", manifest) if out_dir is not None else None

    reports: dict[tuple[int, str], EvalReport] = {}
    for seed in seeds:
        suite = make_time_sensitive_suite(n, seed=seed)
        train_seq, test_seq = split(suite, SplitSpec(train_fraction, seed=seed))
        train_bin = binarize(train_seq, "BASIC")
        test_bin = binarize(test_seq, "BASIC")
        outcomes = test_bin.outcomes()
        treated = np.array([smp.t for smp in test_bin], dtype=bool)
        config = dataclasses.replace(mtd_config, seed=mtd_config.seed + seed)

        scores: dict[str, np.ndarray] = {}
        scores["s-learner-bi"] = SLearner().fit_binary(train_bin).predict_ite(test_bin.contexts())
        scores["t-learner-bi"] = TLearner().fit_binary(train_bin).predict_ite(test_bin.contexts())
        multi_model = _train_mtd(collapse_multi(train_seq).to_sequence(), config, use_timestamps=False)
        scores["mtdnet-multi"] = predict_ite(multi_model, collapse_multi(test_seq).to_sequence())
        full_model = _train_mtd(train_seq, config)
        scores["mtdnet-original"] = predict_ite(full_model, test_seq)

        curves = {}
        for name in RQ2_ROWS:
            report = evaluate_scores(Scored.from_arrays(scores[name], outcomes, treated))
            reports[(seed, name)] = report
            curves[name] = report.qini_points
            if run_dir is not None:
                _write_report_curves(run_dir / "curves" / f"seed{seed}", name, report)
        if run_dir is not None:
            svg = curves_to_svg(curves, title=f"qini gains, time-sensitive suite, seed {seed}")
            (run_dir / "curves" / f"seed{seed}" / "qini.svg").write_text(svg, encoding="utf-8")

    cells = {
        name: {
            metric: CellStat(tuple(_metric_value(reports[(s, name)], metric) for s in seeds))
            for metric in METRICS
        }
        for name in RQ2_ROWS
    }
    result = Rq2Result(RQ2_ROWS, METRICS, seeds, cells, run_dir)
    if run_dir is not None:
        (run_dir / "table.csv").write_text(result.table_csv(), encoding="utf-8")
        (run_dir / "table.txt").write_text(result.table_text(), encoding="utf-8")
    return result
