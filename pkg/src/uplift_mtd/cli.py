"""Command-line front door: generate, transform, train, evaluate, reproduce.

Every failure exits with a single stderr line ``<error-class>: <message>``
and the class's exit code (input problems 3, config problems 4, training 5,
numeric health 6). Subcommands never modify their inputs; files are written
only under ``--out``. All randomness is pinned by ``--seed`` or the seed
lists passed to the experiment commands.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

try:
    import tomllib as toml_reader
except ModuleNotFoundError:
    import tomli as toml_reader

from . import experiments, synthgen
from .baselines import SLearner, TLearner
from .data import (
    BINARIZE_MODES,
    Dataset,
    binarize,
    collapse_multi,
    load_dataset,
    save_dataset,
)
from .errors import ConfigError, ParseError, SchemaError, UpliftError
from .metrics import (
    Scored,
    auuc,
    average_uplift,
    curve_to_csv,
    curves_to_svg,
    evaluate_scores,
    qini_score,
    uplift_at_k,
)
from .mtdnet import (
    MtdNetModel,
    TrainConfig,
    full_grid,
    grid_search,
    predict_ite,
    save_model,
    small_grid,
    train,
)

DOC_EPILOG = (
    "Exact metric formulas, tie-break and edge-case rules: docs/metrics.md. "
    "Dataset, scores and checkpoint file formats: docs/file-formats.md."
)

_TRAIN_FIELDS = tuple(f.name for f in dataclasses.fields(TrainConfig))
_MODEL_KEYS = ("shared", "use_timestamps")


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(part) for part in text.split(",") if part.strip() != "")
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}; expected comma-separated integers") from None
    if not seeds:
        raise ConfigError("seed list is empty")
    return seeds


def _load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return toml_reader.load(fh)
    except toml_reader.TOMLDecodeError as err:
        raise ConfigError(f"bad config file {path}: {err}") from None


def _resolve_train_config(
    file_cfg: dict, args, base: TrainConfig = TrainConfig()
) -> tuple[TrainConfig, bool, bool]:
    """Layer the [mtdnet] config table, then explicit flags, over a base config."""
    section = file_cfg.get("mtdnet", {})
    if not isinstance(section, dict):
        raise ConfigError("[mtdnet] must be a table")
    unknown = sorted(set(section) - set(_TRAIN_FIELDS) - set(_MODEL_KEYS))
    if unknown:
        raise ConfigError(f"unknown [mtdnet] config keys {unknown}")
    values = dataclasses.asdict(base)
    values.update({key: section[key] for key in section if key in _TRAIN_FIELDS})
    shared = section.get("shared", True)
    use_timestamps = section.get("use_timestamps", True)
    if not isinstance(shared, bool) or not isinstance(use_timestamps, bool):
        raise ConfigError("shared and use_timestamps must be booleans")
    for field in _TRAIN_FIELDS:
        flag = getattr(args, field, None)
        if flag is not None:
            values[field] = flag
    if getattr(args, "disjoint", False):
        shared = False
    if getattr(args, "no_timestamps", False):
        use_timestamps = False
    try:
        config = TrainConfig(**values)
    except TypeError as err:
        raise ConfigError(f"bad mtdnet config: {err}") from None
    return config, shared, use_timestamps


def _toml_literal(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    return '"' + str(value).replace("\\", "\\\\").replace('"', '\\"') + '"'


def _dump_effective_config(path: Path, model: str, config: Optional[TrainConfig],
                           shared: bool = True, use_timestamps: bool = True) -> None:
    lines = [f'model = "{model}"']
    if config is not None:
        lines.append("")
        lines.append("[mtdnet]")
        for field in _TRAIN_FIELDS:
            lines.append(f"{field} = {_toml_literal(getattr(config, field))}")
        lines.append(f"shared = {_toml_literal(shared)}")
        lines.append(f"use_timestamps = {_toml_literal(use_timestamps)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_scores(path, dataset: Dataset) -> np.ndarray:
    """Read an ``id,score`` CSV and align it to the dataset's sample order."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "id,score":
        raise ParseError("scores file must start with the header 'id,score'", line=1)
    by_id: dict[str, float] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        sid, sep, value = line.rpartition(",")
        if not sep or not sid:
            raise ParseError(f"expected 'id,score', got {line!r}", line=lineno)
        if sid in by_id:
            raise SchemaError(f"duplicate score for id {sid!r}")
        try:
            by_id[sid] = float(value)
        except ValueError:
            raise ParseError(f"bad score {value!r}", line=lineno) from None
    missing = [smp.id for smp in dataset if smp.id not in by_id]
    if missing:
        raise SchemaError(f"scores missing for {len(missing)} ids (first: {missing[0]!r})")
    extra = set(by_id) - {smp.id for smp in dataset}
    if extra:
        raise SchemaError(f"scores for {len(extra)} unknown ids (e.g. {sorted(extra)[0]!r})")
    return np.array([by_id[smp.id] for smp in dataset])


def _write_scores(path: Path, ids: Sequence[str], scores: np.ndarray) -> None:
    lines = ["id,score"]
    lines.extend(f"{sid},{repr(float(v))}" for sid, v in zip(ids, scores))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _scored_from_files(scores_path, data_path) -> tuple[Scored, Dataset]:
    dataset = load_dataset(data_path)
    scores = _read_scores(scores_path, dataset)
    scored = Scored.from_arrays(scores, dataset.outcomes(), dataset.treated_flags())
    return scored, dataset


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    dataset = synthgen.preset(args.preset, n=args.n, seed=args.seed)
    save_dataset(dataset, args.out)
    n_treated = int(dataset.treated_flags().sum())
    print(
        f"wrote {args.out}: n={len(dataset)} d={dataset.d} k={dataset.k} s={dataset.s} "
        f"treated={n_treated} positives={int(dataset.outcomes().sum())}"
    )
    return 0


def _cmd_transform(args) -> int:
    dataset = load_dataset(args.input)
    if args.mode == "collapse":
        out_ds = collapse_multi(dataset).to_sequence()
    else:
        out_ds = binarize(dataset, args.mode).to_sequence()
    save_dataset(out_ds, args.out)
    print(f"wrote {args.out}: n={len(out_ds)} d={out_ds.d} k={out_ds.k} s={out_ds.s}")
    return 0


def _cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    file_cfg = _load_toml(args.config) if args.config else {}

    if args.model in ("slearner", "tlearner"):
        learner = SLearner() if args.model == "slearner" else TLearner()
        learner.fit_binary(binarize(dataset, "BASIC"))
        _dump_effective_config(out_dir / "effective-config.toml", args.model, None)
        summary = f"trained {args.model} on {len(dataset)} samples"
        if args.predict:
            target = load_dataset(args.predict)
            _write_scores(out_dir / "scores.csv", [s.id for s in target], learner.predict_ite(target.contexts()))
            summary += f"; scored {len(target)} samples"
        print(summary)
        return 0

    config, shared, use_timestamps = _resolve_train_config(file_cfg, args)
    model = MtdNetModel(
        dataset.d,
        dataset.k,
        dataset.s,
        config.hidden_size,
        config.output_size,
        seed=config.seed,
        attention_query=config.attention_query,
        shared=shared,
        use_timestamps=use_timestamps,
    )
    result = train(model, dataset, config)
    _dump_effective_config(out_dir / "effective-config.toml", "mtdnet", config, shared, use_timestamps)
    save_model(model, out_dir / "model.ckpt")
    log = "\n".join(epoch.line() for epoch in result.history)
    (out_dir / "train-log.txt").write_text(log + "\n", encoding="utf-8")
    summary = (
        f"trained mtdnet on {len(dataset)} samples; epochs {len(result.history)}"
        f" best_epoch {result.best_epoch} best_val {result.best_val!r}"
    )
    if result.stopped_early:
        summary += " (stopped early)"
    if args.predict:
        target = load_dataset(args.predict)
        _write_scores(out_dir / "scores.csv", [s.id for s in target], predict_ite(model, target))
        summary += f"; scored {len(target)} samples"
    print(summary)
    return 0


def _cmd_grid_search(args) -> int:
    dataset = load_dataset(args.data)
    grid = small_grid(args.seed) if args.grid == "small" else full_grid(args.seed)
    result = grid_search(dataset, grid, jobs=args.jobs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "grid-table.tsv").write_text(result.table(), encoding="utf-8")
    best = result.best_config
    _dump_effective_config(out_dir / "best-config.toml", "mtdnet", best)
    print(f"grid {args.grid}: {len(grid)} points; best index {result.best_index} "
          f"val_loss {result.points[result.best_index].val_loss!r}")
    return 0


def _cmd_evaluate(args) -> int:
    scored, _ = _scored_from_files(args.scores, args.data)
    if args.metric == "all":
        report = evaluate_scores(scored)
        print(f"qini {float(report.qini)!r}")
        print(f"auuc {float(report.auuc)!r}")
        print(f"uplift_at_30 {float(report.uplift_at_30.value)!r}")
        print(f"average_uplift {float(report.average_uplift)!r}")
        return 0
    if args.metric == "qini":
        value = qini_score(scored)
    elif args.metric == "auuc":
        value = auuc(scored)
    elif args.metric == "uplift30":
        value = uplift_at_k(scored, 0.30).value
    else:
        value = average_uplift(scored)
    print(repr(float(value)))
    return 0


def _cmd_rq1(args) -> int:
    spec = synthgen.preset_spec(args.preset, n=args.n)
    file_cfg = _load_toml(args.config) if args.config else {}
    config, _, _ = _resolve_train_config(file_cfg, args, base=experiments.DEFAULT_RQ1_CONFIG)
    result = experiments.run_rq1(
        spec,
        seeds=_parse_seeds(args.seeds),
        mtd_config=config,
        train_fraction=args.train_fraction,
        out_dir=args.out,
    )
    print(result.table_text())
    print(f"run dir: {result.run_dir}")
    return 0


def _cmd_rq2(args) -> int:
    file_cfg = _load_toml(args.config) if args.config else {}
    config, _, _ = _resolve_train_config(file_cfg, args, base=experiments.DEFAULT_RQ2_CONFIG)
    result = experiments.run_rq2(
        n=args.n,
        seeds=_parse_seeds(args.seeds),
        mtd_config=config,
        train_fraction=args.train_fraction,
        out_dir=args.out,
    )
    print(result.table_text())
    print(f"run dir: {result.run_dir}")
    return 0


def _cmd_plot_curves(args) -> int:
    scored, _ = _scored_from_files(args.scores, args.data)
    report = evaluate_scores(scored)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "qini.csv").write_text(curve_to_csv(report.qini_points), encoding="utf-8")
    (out_dir / "uplift.csv").write_text(curve_to_csv(report.uplift_points), encoding="utf-8")
    written = ["qini.csv", "uplift.csv"]
    if args.svg:
        svg = curves_to_svg(
            {"qini": report.qini_points, "uplift": report.uplift_points},
            title="gain curves",
        )
        (out_dir / "curves.svg").write_text(svg, encoding="utf-8")
        written.append("curves.svg")
    print(f"wrote {', '.join(written)} under {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser, structural: bool = True) -> None:
    p.add_argument("--config", default=None, help="TOML file with an [mtdnet] table")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--l2", type=float, default=None)
    p.add_argument("--hidden-size", dest="hidden_size", type=int, default=None)
    p.add_argument("--output-size", dest="output_size", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--kld-weight", dest="kld_weight", type=float, default=None)
    p.add_argument(
        "--validation-fraction", dest="validation_fraction", type=float, default=None
    )
    p.add_argument(
        "--attention-query",
        dest="attention_query",
        choices=("representation", "context"),
        default=None,
    )
    if structural:
        p.add_argument(
            "--disjoint",
            action="store_true",
            help="separate representation stacks per arm (requires kld weight 0)",
        )
        p.add_argument(
            "--no-timestamps",
            dest="no_timestamps",
            action="store_true",
            help="zero the timestamp input channel",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uplift-mtd",
        description="Uplift modeling for multiple time-dependent treatments.",
        epilog=DOC_EPILOG,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset", epilog=DOC_EPILOG)
    p.add_argument("--preset", required=True, choices=sorted(synthgen.PRESETS))
    p.add_argument("--n", type=int, default=None, help="sample count (preset default if omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", required=True, help="output dataset path (TSV)")
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser(
        "transform", help="binarize or collapse a sequence dataset", epilog=DOC_EPILOG
    )
    p.add_argument("--mode", required=True, choices=(*BINARIZE_MODES, "collapse"))
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(handler=_cmd_transform)

    p = sub.add_parser("train", help="fit one model on a dataset", epilog=DOC_EPILOG)
    p.add_argument("--model", required=True, choices=("slearner", "tlearner", "mtdnet"))
    p.add_argument("--data", required=True, help="training dataset path")
    p.add_argument("--predict", default=None, help="dataset to score after fitting")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser(
        "grid-search", help="hyperparameter sweep for the network", epilog=DOC_EPILOG
    )
    p.add_argument("--data", required=True)
    p.add_argument("--grid", choices=("small", "full"), default="small")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="parallel workers across grid points")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_grid_search)

    p = sub.add_parser(
        "evaluate", help="score a prediction file against a labeled dataset", epilog=DOC_EPILOG
    )
    p.add_argument("--scores", required=True, help="CSV with header id,score")
    p.add_argument("--data", required=True)
    p.add_argument(
        "--metric", choices=("qini", "auuc", "uplift30", "average", "all"), default="all"
    )
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser(
        "rq1", help="binarization comparison experiment", epilog=DOC_EPILOG
    )
    p.add_argument("--preset", choices=sorted(synthgen.SPEC_PRESETS), default="info-effect")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated list")
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=0.7)
    p.add_argument("--out", required=True)
    _add_train_flags(p, structural=False)
    p.set_defaults(handler=_cmd_rq1)

    p = sub.add_parser(
        "rq2", help="timing study on the time-sensitive suite", epilog=DOC_EPILOG
    )
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated list")
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=0.7)
    p.add_argument("--out", required=True)
    _add_train_flags(p, structural=False)
    p.set_defaults(handler=_cmd_rq2)

    p = sub.add_parser(
        "plot-curves", help="export gain curves for one scorer", epilog=DOC_EPILOG
    )
    p.add_argument("--scores", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--svg", action="store_true", help="also write an SVG chart")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_plot_curves)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except UpliftError as err:
        print(f"{err.slug}: {err}", file=sys.stderr)
        return err.exit_code
    except OSError as err:
        print(f"parse-error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
