"""Two-head uplift network for timed multi-category treatments.

A shared dense stack encodes the context; an LSTM plus additive attention
encodes the treatment sequence (per-step input: the K-hot act row and the
scaled timestamp). The control head reads the representation alone, the
treated head reads representation plus pooled sequence, and training adds a
divergence penalty pulling the two arms' representation distributions
together:

    total = L_C + L_T + L_D
    L_C   = BCE over factual control samples
    L_T   = BCE over factual treated samples
    L_D   = kld_weight * KL(treated representations || control representations)

Batches lacking two rows in either arm skip L_D (counted). Early stopping
watches a validation slice carved from the training set and restores the
best parameters seen.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import HORIZON_DAYS, Dataset
from .errors import ConfigError, ParseError, SchemaError, TrainingError
from .neural import (
    AdditiveAttention,
    Adam,
    Dense,
    DenseStack,
    Lstm,
    ParamStore,
    bce_loss,
    gaussian_kld,
)

BATCH_GRID = (32, 64, 128)
EPOCH_GRID = (50, 100, 150)
LR_GRID = (1e-4, 1e-5, 5e-6)
L2_GRID = (1e-4, 1e-5, 1e-6)
HIDDEN_GRID = (32, 64, 128, 256)
OUTPUT_GRID = (8, 16, 32)

ATTENTION_QUERIES = ("representation", "context")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 100
    learning_rate: float = 1e-4
    l2: float = 1e-5
    hidden_size: int = 64
    output_size: int = 16
    patience: int = 8
    seed: int = 0
    kld_weight: float = 1.0
    validation_fraction: float = 0.15
    attention_query: str = "representation"

    def __post_init__(self) -> None:
        if min(self.batch_size, self.epochs, self.hidden_size, self.output_size) < 1:
            raise ConfigError("batch_size, epochs, hidden_size and output_size must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.learning_rate < 0 or self.l2 < 0:
            raise ConfigError("learning_rate and l2 must be nonnegative")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in [0, 1)")
        if self.kld_weight < 0:
            raise ConfigError("kld_weight must be nonnegative")
        if self.attention_query not in ATTENTION_QUERIES:
            raise ConfigError(f"attention_query must be one of {ATTENTION_QUERIES}")


def full_grid(seed: int = 0, **overrides) -> tuple[TrainConfig, ...]:
    """The exhaustive 972-point hyperparameter grid; point i trains with seed+i."""
    out = []
    combos = itertools.product(BATCH_GRID, EPOCH_GRID, LR_GRID, L2_GRID, HIDDEN_GRID, OUTPUT_GRID)
    for i, (batch, epochs, lr, l2, hidden, output) in enumerate(combos):
        out.append(
            TrainConfig(
                batch_size=batch,
                epochs=epochs,
                learning_rate=lr,
                l2=l2,
                hidden_size=hidden,
                output_size=output,
                seed=seed + i,
                **overrides,
            )
        )
    return tuple(out)


def small_grid(seed: int = 0, **overrides) -> tuple[TrainConfig, ...]:
    """Documented 12-point sub-grid for bounded-time searches.

    Fixed: batch 128, epochs 50, output 16. Swept: learning rate
    {1e-4, 1e-5} x l2 {1e-4, 1e-6} x hidden {32, 64, 128}. Point i trains
    with seed+i.
    """
    out = []
    combos = itertools.product((1e-4, 1e-5), (1e-4, 1e-6), (32, 64, 128))
    for i, (lr, l2, hidden) in enumerate(combos):
        out.append(
            TrainConfig(
                batch_size=128,
                epochs=50,
                learning_rate=lr,
                l2=l2,
                hidden_size=hidden,
                output_size=16,
                seed=seed + i,
                **overrides,
            )
        )
    return tuple(out)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class Arrays:
    """Dataset flattened to training tensors."""

    x: np.ndarray  # (N, D)
    seq: np.ndarray  # (N, S, K+1): act rows plus scaled-timestamp channel
    mask: np.ndarray  # (N, S)
    outcomes: np.ndarray  # (N,)
    treated: np.ndarray  # (N,) bool

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class ForwardOut:
    pred_control: np.ndarray  # (B,)
    pred_treated: np.ndarray  # (B,)
    repr_control: np.ndarray  # control rows of the balanced representation
    repr_treated: np.ndarray  # treated rows
    treated: np.ndarray  # (B,) bool
    caches: Optional[dict] = None


class MtdNetModel:
    """Representation stack + sequence encoder + two sigmoid heads.

    ``shared=False`` gives each head its own representation stack (used to
    reduce the architecture to a neural two-model baseline). Weight streams
    are seeded per component so a standalone copy of one arm can reproduce
    the exact same initial parameters.
    """

    def __init__(
        self,
        d: int,
        k: int,
        s: int,
        hidden_size: int,
        output_size: int,
        seed: int = 0,
        attention_query: str = "representation",
        shared: bool = True,
        use_timestamps: bool = True,
    ):
        if attention_query not in ATTENTION_QUERIES:
            raise ConfigError(f"attention_query must be one of {ATTENTION_QUERIES}")
        self.d, self.k, self.s = d, k, s
        self.hidden_size, self.output_size = hidden_size, output_size
        self.seed = seed
        self.attention_query = attention_query
        self.shared = shared
        self.use_timestamps = use_timestamps
        self.store = ParamStore()

        def stream(tag: int) -> np.random.Generator:
            return np.random.default_rng([seed, tag])

        sizes = [d, hidden_size, output_size]
        self.repr_control = DenseStack(self.store, "repr_c", sizes, ["relu", "identity"], stream(10))
        if shared:
            self.repr_treated = self.repr_control
        else:
            self.repr_treated = DenseStack(self.store, "repr_t", sizes, ["relu", "identity"], stream(11))
        enc_rng = stream(12)
        self.lstm = Lstm(self.store, "seq", k + 1, hidden_size, enc_rng)
        n_query = output_size if attention_query == "representation" else d
        self.attn = AdditiveAttention(self.store, "attn", hidden_size, n_query, hidden_size, enc_rng)
        self.head_control = Dense(self.store, "head_c", output_size, 1, "sigmoid", stream(13))
        self.head_treated = Dense(self.store, "head_t", output_size + hidden_size, 1, "sigmoid", stream(14))

    # -- data plumbing ------------------------------------------------------

    def arrays(self, dataset: Dataset) -> Arrays:
        if (dataset.d, dataset.k, dataset.s) != (self.d, self.k, self.s):
            raise SchemaError(
                f"dataset dims (D={dataset.d}, K={dataset.k}, S={dataset.s}) do not match "
                f"model dims (D={self.d}, K={self.k}, S={self.s})"
            )
        n = len(dataset)
        seq = np.zeros((n, self.s, self.k + 1))
        mask = np.zeros((n, self.s))
        for i, smp in enumerate(dataset):
            seq[i, :, : self.k] = smp.treatments.matrix
            mask[i] = smp.treatments.mask
            if self.use_timestamps:
                seq[i, :, self.k] = smp.treatments.timestamps / HORIZON_DAYS * smp.treatments.mask
        return Arrays(
            x=dataset.contexts(),
            seq=seq,
            mask=mask,
            outcomes=dataset.outcomes(),
            treated=dataset.treated_flags(),
        )

    # -- forward ------------------------------------------------------------

    def forward(self, arrays: Arrays, idx: Optional[np.ndarray] = None, keep_caches: bool = False) -> ForwardOut:
        if idx is None:
            x, seq, mask, treated = arrays.x, arrays.seq, arrays.mask, arrays.treated
        else:
            x, seq, mask, treated = arrays.x[idx], arrays.seq[idx], arrays.mask[idx], arrays.treated[idx]
        if x.shape[0] == 0:
            raise SchemaError("empty batch")

        repr_c, cache_rc = self.repr_control.forward(x)
        if self.shared:
            repr_t, cache_rt = repr_c, None
        else:
            repr_t, cache_rt = self.repr_treated.forward(x)
        hs, cache_seq = self.lstm.forward(seq, mask)
        query = repr_t if self.attention_query == "representation" else x
        _, pooled, cache_attn = self.attn.forward(hs, query, mask)
        pred_c, cache_hc = self.head_control.forward(repr_c)
        pred_t, cache_ht = self.head_treated.forward(np.concatenate([repr_t, pooled], axis=1))

        caches = None
        if keep_caches:
            caches = {
                "repr_c": cache_rc,
                "repr_t": cache_rt,
                "seq": cache_seq,
                "attn": cache_attn,
                "head_c": cache_hc,
                "head_t": cache_ht,
                "treated": treated,
            }
        # the balanced representation is the one the control head reads
        return ForwardOut(
            pred_control=pred_c[:, 0],
            pred_treated=pred_t[:, 0],
            repr_control=repr_c[~treated],
            repr_treated=repr_c[treated],
            treated=treated,
            caches=caches,
        )

    def snapshot(self) -> dict[str, np.ndarray]:
        return self.store.copy_values()

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        self.store.restore_values(snap)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossParts:
    total: float
    l_c: float
    l_t: float
    l_d: float
    kld_skipped: bool
    n_control: int
    n_treated: int


def _loss_with_grads(out: ForwardOut, outcomes: np.ndarray, kld_weight: float):
    treated = out.treated
    n_c = int((~treated).sum())
    n_t = int(treated.sum())

    d_pred_c = np.zeros(treated.shape[0])
    d_pred_t = np.zeros(treated.shape[0])
    l_c = l_t = 0.0
    if n_c:
        l_c, g = bce_loss(out.pred_control[~treated], outcomes[~treated])
        d_pred_c[~treated] = g
    if n_t:
        l_t, g = bce_loss(out.pred_treated[treated], outcomes[treated])
        d_pred_t[treated] = g

    l_d = 0.0
    skipped = True
    d_repr = None
    if kld_weight != 0.0 and n_c >= 2 and n_t >= 2:
        value, d_t_rows, d_c_rows = gaussian_kld(out.repr_treated, out.repr_control)
        l_d = kld_weight * value
        d_repr = (kld_weight * d_c_rows, kld_weight * d_t_rows)
        skipped = False

    parts = LossParts(
        total=l_c + l_t + l_d,
        l_c=l_c,
        l_t=l_t,
        l_d=l_d,
        kld_skipped=skipped,
        n_control=n_c,
        n_treated=n_t,
    )
    return parts, d_pred_c, d_pred_t, d_repr


def total_loss(out: ForwardOut, outcomes: np.ndarray, kld_weight: float = 1.0) -> LossParts:
    """Loss components for one batch; ``total`` is exactly their sum."""
    parts, _, _, _ = _loss_with_grads(out, outcomes, kld_weight)
    return parts


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepLog:
    epoch: int
    step: int
    l_c: float
    l_t: float
    l_d: float
    total: float


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    l_c: float
    l_t: float
    l_d: float
    total: float
    val_total: float
    kld_skips: int

    def line(self) -> str:
        return (
            f"epoch {self.epoch} l_c {self.l_c:.6f} l_t {self.l_t:.6f} "
            f"l_d {self.l_d:.6f} total {self.total:.6f} val_total {self.val_total:.6f}"
        )


@dataclass
class TrainResult:
    model: MtdNetModel
    history: list[EpochLog]
    steps: list[StepLog]
    best_epoch: int
    best_val: float
    stopped_early: bool
    kld_skips: int


def _backward(model: MtdNetModel, out: ForwardOut, d_pred_c, d_pred_t, d_repr) -> None:
    caches = out.caches
    treated = caches["treated"]

    d_repr_c = model.head_control.backward(d_pred_c[:, None], caches["head_c"])
    d_concat = model.head_treated.backward(d_pred_t[:, None], caches["head_t"])
    r = model.output_size
    d_repr_t = d_concat[:, :r]
    d_pooled = d_concat[:, r:]

    d_hs, d_query = model.attn.backward(None, d_pooled, caches["attn"])
    model.lstm.backward(d_hs, caches["seq"])

    if model.attention_query == "representation":
        d_repr_t = d_repr_t + d_query

    if d_repr is not None:
        d_c_rows, d_t_rows = d_repr
        d_kld = np.zeros_like(d_repr_c)
        d_kld[~treated] = d_c_rows
        d_kld[treated] = d_t_rows
        d_repr_c = d_repr_c + d_kld

    if model.shared:
        model.repr_control.backward(d_repr_c + d_repr_t, caches["repr_c"])
    else:
        model.repr_control.backward(d_repr_c, caches["repr_c"])
        model.repr_treated.backward(d_repr_t, caches["repr_t"])


def _check_both_arms(treated: np.ndarray, where: str) -> None:
    if not treated.any():
        raise TrainingError(f"single-arm {where}: no treated samples")
    if treated.all():
        raise TrainingError(f"single-arm {where}: no control samples")


def train(
    model: MtdNetModel,
    train_set: Dataset,
    config: TrainConfig,
    record_steps: bool = False,
) -> TrainResult:
    """Mini-batch Adam with patience-based early stopping.

    Stops once the count of consecutive non-improving validation epochs
    exceeds ``patience``, then restores the best parameters. With
    ``validation_fraction`` 0 (or a slice that rounds to nothing) the run
    uses the full epoch budget and keeps the final parameters.
    """
    if len(train_set) == 0:
        raise TrainingError("empty training set")
    if not model.shared and config.kld_weight != 0.0:
        raise ConfigError("disjoint representation stacks require kld_weight=0")
    arrays = model.arrays(train_set)
    _check_both_arms(arrays.treated, "training set")

    n = len(arrays)
    n_val = int(n * config.validation_fraction + 0.5)
    order = np.random.default_rng([config.seed, 99]).permutation(n)
    val_idx, fit_idx = order[:n_val], order[n_val:]
    if fit_idx.size == 0:
        raise TrainingError("validation split leaves no training rows")
    _check_both_arms(arrays.treated[fit_idx], "training slice")

    optimizer = Adam(model.store, config.learning_rate, config.l2)
    history: list[EpochLog] = []
    steps: list[StepLog] = []
    best_val = np.inf
    best_epoch = -1
    best_snap = None
    bad = 0
    kld_skips = 0
    stopped_early = False

    for epoch in range(config.epochs):
        perm = np.random.default_rng([config.seed, 1000 + epoch]).permutation(fit_idx)
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, perm.size, config.batch_size):
            idx = perm[start : start + config.batch_size]
            model.store.zero_grads()
            out = model.forward(arrays, idx, keep_caches=True)
            parts, d_pred_c, d_pred_t, d_repr = _loss_with_grads(out, arrays.outcomes[idx], config.kld_weight)
            _backward(model, out, d_pred_c, d_pred_t, d_repr)
            optimizer.step()
            if parts.kld_skipped:
                kld_skips += 1
            sums += (parts.l_c, parts.l_t, parts.l_d, parts.total)
            if record_steps:
                steps.append(StepLog(epoch, n_batches, parts.l_c, parts.l_t, parts.l_d, parts.total))
            n_batches += 1

        means = sums / n_batches
        val_total = np.nan
        if val_idx.size:
            val_out = model.forward(arrays, val_idx)
            val_total = total_loss(val_out, arrays.outcomes[val_idx], config.kld_weight).total
        history.append(EpochLog(epoch, means[0], means[1], means[2], means[3], val_total, kld_skips))

        if val_idx.size:
            if val_total < best_val:
                best_val = float(val_total)
                best_epoch = epoch
                best_snap = model.snapshot()
                bad = 0
            else:
                bad += 1
                if bad > config.patience:
                    stopped_early = True
                    break

    if best_snap is not None:
        model.restore(best_snap)
    else:
        best_epoch = config.epochs - 1
        best_val = history[-1].total if history else np.nan

    return TrainResult(
        model=model,
        history=history,
        steps=steps,
        best_epoch=best_epoch,
        best_val=float(best_val),
        stopped_early=stopped_early,
        kld_skips=kld_skips,
    )


def predict_ite(model: MtdNetModel, dataset: Dataset, chunk: int = 1024) -> np.ndarray:
    """Treated-head minus control-head prediction per sample.

    The treated head reads each sample's own (possibly empty) sequence, so a
    control sample's ITE is the predicted effect of staying at zero acts.
    """
    arrays = model.arrays(dataset)
    out = np.empty(len(arrays))
    for start in range(0, len(arrays), chunk):
        idx = np.arange(start, min(start + chunk, len(arrays)))
        fwd = model.forward(arrays, idx)
        out[idx] = fwd.pred_treated - fwd.pred_control
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MODEL_HEADER = "#uplift-mtd-model v1"

_META_FIELDS = (
    "d",
    "k",
    "s",
    "hidden_size",
    "output_size",
    "seed",
    "attention_query",
    "shared",
    "use_timestamps",
)


def save_model(model: MtdNetModel, path) -> None:
    """Write architecture metadata plus the full parameter block as text."""
    meta = [MODEL_HEADER]
    for field in _META_FIELDS:
        value = getattr(model, field)
        if isinstance(value, bool):
            value = int(value)
        meta.append(f"{field} {value}")
    Path(path).write_text("\n".join(meta) + "\n" + model.store.dumps(), encoding="utf-8")


def load_model(path) -> MtdNetModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MODEL_HEADER:
        raise ParseError(f"bad model header; expected {MODEL_HEADER!r}", line=1)
    meta: dict[str, str] = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("#"):
        parts = lines[i].split()
        if len(parts) != 2:
            raise ParseError(f"bad metadata line {lines[i]!r}", line=i + 1)
        meta[parts[0]] = parts[1]
        i += 1
    missing = [f for f in _META_FIELDS if f not in meta]
    if missing:
        raise ParseError(f"model metadata missing {missing}")
    try:
        model = MtdNetModel(
            d=int(meta["d"]),
            k=int(meta["k"]),
            s=int(meta["s"]),
            hidden_size=int(meta["hidden_size"]),
            output_size=int(meta["output_size"]),
            seed=int(meta["seed"]),
            attention_query=meta["attention_query"],
            shared=bool(int(meta["shared"])),
            use_timestamps=bool(int(meta["use_timestamps"])),
        )
    except ValueError as err:
        raise ParseError(f"bad model metadata value: {err}") from None
    model.store.loads("\n".join(lines[i:]) + "\n")
    return model


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridPoint:
    config: TrainConfig
    val_loss: float
    best_epoch: int
    stopped_early: bool


@dataclass(frozen=True)
class GridResult:
    points: tuple[GridPoint, ...]
    best_index: int

    @property
    def best_config(self) -> TrainConfig:
        return self.points[self.best_index].config

    def table(self) -> str:
        lines = ["index\tbatch\tepochs\tlr\tl2\thidden\toutput\tval_loss\tbest_epoch"]
        for i, pt in enumerate(self.points):
            c = pt.config
            lines.append(
                f"{i}\t{c.batch_size}\t{c.epochs}\t{c.learning_rate!r}\t{c.l2!r}"
                f"\t{c.hidden_size}\t{c.output_size}\t{pt.val_loss!r}\t{pt.best_epoch}"
            )
        return "\n".join(lines) + "\n"


def _run_point(args) -> GridPoint:
    train_set, config, model_kwargs = args
    model = MtdNetModel(
        train_set.d,
        train_set.k,
        train_set.s,
        hidden_size=config.hidden_size,
        output_size=config.output_size,
        seed=config.seed,
        attention_query=config.attention_query,
        **model_kwargs,
    )
    result = train(model, train_set, config)
    return GridPoint(config, result.best_val, result.best_epoch, result.stopped_early)


def grid_search(
    train_set: Dataset,
    grid: Sequence[TrainConfig],
    jobs: int = 1,
    **model_kwargs,
) -> GridResult:
    """Evaluate every config; best = lowest validation loss, ties to grid order."""
    if not grid:
        raise ConfigError("empty hyperparameter grid")
    tasks = [(train_set, config, model_kwargs) for config in grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            points = list(pool.map(_run_point, tasks))
    else:
        points = [_run_point(t) for t in tasks]
    vals = [pt.val_loss for pt in points]
    best = int(np.nanargmin(vals)) if not all(np.isnan(vals)) else 0
    return GridResult(points=tuple(points), best_index=best)
