"""Core data model: samples, treatment sequences, transforms, splits, file io.

A sequence dataset holds one row per company: a fixed-dimension context
vector, a padded+masked matrix of timed treatment acts, a binary outcome
(1 = bankrupt within the horizon), and, on synthetic data, the ground-truth
individual treatment effect on the probability scale.

Two derived in-memory views exist for the simpler treatment scenarios:
``BinaryDataset`` (scalar T in {0,1}) and ``CollapsedDataset`` (per-category
presence vector, timing discarded). Both lift back to sequence datasets so a
single file format covers everything (see docs/file-formats.md).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ParseError, SchemaError, SizeError, TaxonomyError

HEADER_PREFIX = "#uplift-mtd v1"

# timestamps count days since statement release; outcomes sit at a one-year horizon
HORIZON_DAYS = 365.0

PERSONNEL = "PERSONNEL"
INFORMATION = "INFORMATION"
OTHER = "OTHER"
GROUPS = (PERSONNEL, INFORMATION, OTHER)

BINARIZE_MODES = ("BASIC", PERSONNEL, INFORMATION, OTHER)


def _fmt(x: float) -> str:
    """Shortest decimal string that round-trips the float64 bit pattern."""
    return repr(float(x))


@dataclass(frozen=True)
class TreatmentSeq:
    """Padded matrix of timed treatment acts.

    ``matrix`` is (S, K) with entries in {0,1}; ``mask`` is (S,) with 1 on
    real steps; ``timestamps`` is (S,) days since statement release, 0.0 on
    padding. Unmasked rows carry at least one act; an all-zero matrix with a
    zero mask is the control sample.
    """

    matrix: np.ndarray
    mask: np.ndarray
    timestamps: np.ndarray

    @property
    def n_steps(self) -> int:
        return int(round(float(self.mask.sum())))

    @property
    def is_control(self) -> bool:
        return self.n_steps == 0

    def presence(self) -> np.ndarray:
        """Any-occurrence indicator per category (length K)."""
        if self.matrix.shape[0] == 0:
            return np.zeros(self.matrix.shape[1])
        return (self.matrix * self.mask[:, None]).max(axis=0)

    @staticmethod
    def empty(k: int, s: int) -> "TreatmentSeq":
        return TreatmentSeq(np.zeros((s, k)), np.zeros(s), np.zeros(s))

    @staticmethod
    def from_acts(acts: Sequence[tuple[int, float]], k: int, s: int) -> "TreatmentSeq":
        """Build a sequence from (category, timestamp) acts.

        Acts are sorted by timestamp; acts sharing a timestamp share a step.
        Sequences longer than ``s`` steps keep the most recent steps.
        """
        for cat, _ in acts:
            if not 0 <= cat < k:
                raise TaxonomyError(f"category {cat} outside [0, {k})")
        by_time: dict[float, set[int]] = {}
        for cat, ts in acts:
            by_time.setdefault(float(ts), set()).add(cat)
        steps = sorted(by_time.items())[-s:]
        matrix = np.zeros((s, k))
        mask = np.zeros(s)
        timestamps = np.zeros(s)
        for i, (ts, cats) in enumerate(steps):
            mask[i] = 1.0
            timestamps[i] = ts
            for cat in cats:
                matrix[i, cat] = 1.0
        return TreatmentSeq(matrix, mask, timestamps)

    def validate(self, k: int, s: int) -> None:
        if self.matrix.shape != (s, k):
            raise SchemaError(f"treatment matrix shape {self.matrix.shape} != ({s}, {k})")
        if self.mask.shape != (s,) or self.timestamps.shape != (s,):
            raise SchemaError("mask/timestamps length mismatch")
        if not np.isin(self.matrix, (0.0, 1.0)).all():
            raise SchemaError("treatment matrix entries must be 0 or 1")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise SchemaError("mask entries must be 0 or 1")
        if (np.diff(self.mask) > 0).any():
            raise SchemaError("unmasked rows must form a prefix")
        if (self.timestamps < 0).any() or not np.isfinite(self.timestamps).all():
            raise SchemaError("timestamps must be finite and nonnegative")
        pad = self.mask == 0.0
        if self.matrix[pad].any():
            raise SchemaError("masked-out rows must be all-zero")
        if self.timestamps[pad].any():
            raise SchemaError("masked-out timestamps must be 0")
        live = ~pad
        if live.any():
            if (self.matrix[live].sum(axis=1) == 0).any():
                raise SchemaError("unmasked step carries no act")
            ts = self.timestamps[live]
            if (np.diff(ts) < 0).any():
                raise SchemaError("timestamps must be nondecreasing over unmasked rows")


@dataclass(frozen=True)
class Sample:
    """One company: context features, treatment sequence, binary outcome."""

    id: str
    context: np.ndarray
    treatments: TreatmentSeq
    outcome: int
    true_ite: Optional[float] = None

    @property
    def treated(self) -> bool:
        return not self.treatments.is_control

    def validate(self, d: int, k: int, s: int) -> None:
        if self.context.shape != (d,):
            raise SchemaError(f"sample {self.id}: context dim {self.context.shape} != ({d},)")
        if not np.isfinite(self.context).all():
            raise SchemaError(f"sample {self.id}: non-finite context entry")
        if self.outcome not in (0, 1):
            raise SchemaError(f"sample {self.id}: outcome must be 0 or 1")
        if self.true_ite is not None and not np.isfinite(self.true_ite):
            raise SchemaError(f"sample {self.id}: non-finite true_ite")
        self.treatments.validate(k, s)


@dataclass(frozen=True)
class Dataset:
    """Sequence dataset with fixed dims: D context features, K categories, S steps."""

    d: int
    k: int
    s: int
    samples: tuple[Sample, ...]
    label: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    @property
    def has_truth(self) -> bool:
        return len(self.samples) > 0 and self.samples[0].true_ite is not None

    def contexts(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.d))
        return np.stack([smp.context for smp in self.samples])

    def outcomes(self) -> np.ndarray:
        return np.array([smp.outcome for smp in self.samples], dtype=float)

    def treated_flags(self) -> np.ndarray:
        return np.array([smp.treated for smp in self.samples], dtype=bool)

    def true_ites(self) -> np.ndarray:
        if not self.has_truth:
            raise SchemaError("dataset carries no ground-truth effects")
        return np.array([smp.true_ite for smp in self.samples], dtype=float)

    def validate(self) -> None:
        truth_flags = {smp.true_ite is not None for smp in self.samples}
        if len(truth_flags) > 1:
            raise SchemaError("true_ite must be present on all samples or none")
        for smp in self.samples:
            smp.validate(self.d, self.k, self.s)


@dataclass(frozen=True)
class BinarySample:
    id: str
    context: np.ndarray
    t: int
    outcome: int
    true_ite: Optional[float] = None


@dataclass(frozen=True)
class BinaryDataset:
    """Binary-treatment view: T=1 samples vs T=0, context and outcome unchanged."""

    d: int
    samples: tuple[BinarySample, ...]
    label: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[BinarySample]:
        return iter(self.samples)

    def contexts(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.d))
        return np.stack([smp.context for smp in self.samples])

    def outcomes(self) -> np.ndarray:
        return np.array([smp.outcome for smp in self.samples], dtype=float)

    def treated_flags(self) -> np.ndarray:
        return np.array([smp.t == 1 for smp in self.samples], dtype=bool)

    def to_sequence(self) -> Dataset:
        """Lift to a K=1, S=1 sequence dataset (T=1 becomes one act at day 0)."""
        out = []
        for smp in self.samples:
            if smp.t:
                seq = TreatmentSeq(np.ones((1, 1)), np.ones(1), np.zeros(1))
            else:
                seq = TreatmentSeq.empty(1, 1)
            out.append(Sample(smp.id, smp.context, seq, smp.outcome, smp.true_ite))
        return Dataset(self.d, 1, 1, tuple(out), label=self.label)


@dataclass(frozen=True)
class CollapsedSample:
    id: str
    context: np.ndarray
    presence: np.ndarray
    outcome: int
    true_ite: Optional[float] = None


@dataclass(frozen=True)
class CollapsedDataset:
    """Multiple-treatment view: per-category presence, timing discarded."""

    d: int
    k: int
    samples: tuple[CollapsedSample, ...]
    label: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[CollapsedSample]:
        return iter(self.samples)

    def to_sequence(self) -> Dataset:
        """Lift to an S=1 sequence dataset: the presence row as a single day-0 step."""
        out = []
        for smp in self.samples:
            if smp.presence.any():
                seq = TreatmentSeq(smp.presence[None, :].astype(float), np.ones(1), np.zeros(1))
            else:
                seq = TreatmentSeq.empty(self.k, 1)
            out.append(Sample(smp.id, smp.context, seq, smp.outcome, smp.true_ite))
        return Dataset(self.d, self.k, 1, tuple(out), label=self.label)


@dataclass(frozen=True)
class CategoryMap:
    """Total mapping from treatment-category index to one of the three groups."""

    groups: tuple[str, ...]

    def __post_init__(self):
        for i, g in enumerate(self.groups):
            if g not in GROUPS:
                raise TaxonomyError(f"category {i}: unknown group {g!r}")

    @property
    def k(self) -> int:
        return len(self.groups)

    @staticmethod
    def default(k: int = 24) -> "CategoryMap":
        """Thirds convention: low indices personnel, middle information, rest other."""
        cut1, cut2 = k // 3, 2 * k // 3
        groups = tuple(
            PERSONNEL if i < cut1 else INFORMATION if i < cut2 else OTHER for i in range(k)
        )
        return CategoryMap(groups)

    def indices(self, group: str) -> np.ndarray:
        return np.array([i for i, g in enumerate(self.groups) if g == group], dtype=int)

    def to_toml(self) -> str:
        lines = ["[groups]"]
        for g in GROUPS:
            lines.append(f"{g.lower()} = {[int(i) for i in self.indices(g)]}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_dict(doc: dict, k: Optional[int] = None) -> "CategoryMap":
        try:
            tables = doc["groups"]
        except KeyError:
            raise TaxonomyError("category map file needs a [groups] table") from None
        assign: dict[int, str] = {}
        for g in GROUPS:
            for idx in tables.get(g.lower(), []):
                if idx in assign:
                    raise TaxonomyError(f"category {idx} assigned to two groups")
                assign[int(idx)] = g
        n = k if k is not None else (max(assign) + 1 if assign else 0)
        missing = [i for i in range(n) if i not in assign]
        if missing:
            raise TaxonomyError(f"categories without a group: {missing}")
        extra = [i for i in assign if i >= n]
        if extra:
            raise TaxonomyError(f"categories outside [0, {n}): {sorted(extra)}")
        return CategoryMap(tuple(assign[i] for i in range(n)))


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise SizeError(f"train_fraction {self.train_fraction} outside (0, 1)")


def binarize(dataset: Dataset, mode: str, category_map: Optional[CategoryMap] = None) -> BinaryDataset:
    """Reduce timed multi-category treatments to a scalar T in {0,1}.

    BASIC sets T=1 iff any act exists; the group modes set T=1 iff any act of
    that group exists (acts of other groups leave the sample at T=0 rather
    than removing it). Context, outcome and ground truth are unchanged.
    """
    if mode not in BINARIZE_MODES:
        raise TaxonomyError(f"unknown binarize mode {mode!r}")
    if mode == "BASIC":
        flags = [smp.treated for smp in dataset]
    else:
        if category_map is None:
            category_map = CategoryMap.default(dataset.k)
        if category_map.k != dataset.k:
            raise TaxonomyError(
                f"category map covers {category_map.k} categories, dataset has {dataset.k}"
            )
        idx = category_map.indices(mode)
        flags = [bool(smp.treatments.presence()[idx].any()) for smp in dataset]
    out = tuple(
        BinarySample(smp.id, smp.context, int(f), smp.outcome, smp.true_ite)
        for smp, f in zip(dataset, flags)
    )
    return BinaryDataset(dataset.d, out, label=dataset.label)


def collapse_multi(dataset: Dataset) -> CollapsedDataset:
    """Drop timing: per-category any-occurrence presence vector."""
    out = tuple(
        CollapsedSample(smp.id, smp.context, smp.treatments.presence(), smp.outcome, smp.true_ite)
        for smp in dataset
    )
    return CollapsedDataset(dataset.d, dataset.k, out, label=dataset.label)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Deterministic train/test split; a function of (seed, sample ids) only.

    Samples are put in canonical id order before the seeded shuffle, so any
    permutation of the input yields the identical id partition.
    """
    n = len(dataset)
    if n < 2:
        raise SizeError(f"cannot split {n} samples")
    ids = [smp.id for smp in dataset]
    if len(set(ids)) != n:
        raise SchemaError("duplicate sample ids")
    n_train = _round_half_up(spec.train_fraction * n)
    if n_train == 0 or n_train == n:
        raise SizeError(f"degenerate split: {n_train}/{n} train samples")
    ordered = sorted(dataset.samples, key=lambda smp: smp.id)
    perm = np.random.default_rng(spec.seed).permutation(n)
    train = tuple(ordered[i] for i in perm[:n_train])
    test = tuple(ordered[i] for i in perm[n_train:])
    mk = lambda part: Dataset(dataset.d, dataset.k, dataset.s, part, label=dataset.label)
    return mk(train), mk(test)


# ---------------------------------------------------------------------------
# File format (docs/file-formats.md)
# ---------------------------------------------------------------------------


def _format_sample(smp: Sample) -> str:
    ite = "" if smp.true_ite is None else _fmt(smp.true_ite)
    ctx = ",".join(_fmt(v) for v in smp.context)
    rows = []
    seq = smp.treatments
    for i in range(seq.matrix.shape[0]):
        if seq.mask[i] == 0.0:
            continue
        cats = ",".join(f"{j}:1" for j in np.flatnonzero(seq.matrix[i]))
        rows.append(f"{i},{_fmt(seq.timestamps[i])},{cats}")
    return "\t".join([smp.id, str(smp.outcome), ite, ctx, ";".join(rows)])


def save_dataset(dataset: Dataset, path) -> None:
    lines = [f"{HEADER_PREFIX} D={dataset.d} K={dataset.k} S={dataset.s}"]
    lines.extend(_format_sample(smp) for smp in dataset)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str) -> tuple[int, int, int]:
    parts = line.strip().split()
    if parts[:2] != ["#uplift-mtd", "v1"] or len(parts) != 5:
        raise ParseError(f"bad header {line.strip()!r}; expected '{HEADER_PREFIX} D=<d> K=<k> S=<s>'", line=1)
    dims = {}
    for part in parts[2:]:
        key, _, val = part.partition("=")
        if key not in ("D", "K", "S") or not val.isdigit():
            raise ParseError(f"bad header field {part!r}", line=1)
        dims[key] = int(val)
    if set(dims) != {"D", "K", "S"}:
        raise ParseError("header must carry D=, K= and S=", line=1)
    return dims["D"], dims["K"], dims["S"]


def _parse_record(line: str, lineno: int, d: int, k: int, s: int) -> Sample:
    fields = line.split("\t")
    if len(fields) != 5:
        raise ParseError(f"expected 5 tab-separated fields, got {len(fields)}", line=lineno)
    sid, outcome_s, ite_s, ctx_s, seq_s = fields
    if not sid:
        raise ParseError("empty id", line=lineno)
    if outcome_s not in ("0", "1"):
        raise ParseError(f"outcome must be 0 or 1, got {outcome_s!r}", line=lineno)
    try:
        ite = None if ite_s == "" else float(ite_s)
        ctx_vals = [float(v) for v in ctx_s.split(",")] if ctx_s else []
    except ValueError as exc:
        raise ParseError(str(exc), line=lineno) from None
    if len(ctx_vals) != d:
        raise SchemaError(f"line {lineno}: context has {len(ctx_vals)} entries, header says D={d}")
    matrix = np.zeros((s, k))
    mask = np.zeros(s)
    timestamps = np.zeros(s)
    if seq_s:
        for row in seq_s.split(";"):
            parts = row.split(",")
            if len(parts) < 3:
                raise ParseError(f"treatment row {row!r} needs step,timestamp,cat:val", line=lineno)
            try:
                step = int(parts[0])
                ts = float(parts[1])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if not 0 <= step < s:
                raise SchemaError(f"line {lineno}: step {step} outside [0, {s})")
            if mask[step]:
                raise ParseError(f"step {step} listed twice", line=lineno)
            mask[step] = 1.0
            timestamps[step] = ts
            for pair in parts[2:]:
                cat_s, _, val_s = pair.partition(":")
                try:
                    cat = int(cat_s)
                    val = int(val_s)
                except ValueError:
                    raise ParseError(f"bad act {pair!r}", line=lineno) from None
                if not 0 <= cat < k:
                    raise SchemaError(f"line {lineno}: category {cat} outside [0, {k})")
                if val not in (0, 1):
                    raise ParseError(f"act value must be 0 or 1, got {val}", line=lineno)
                matrix[step, cat] = float(val)
    smp = Sample(sid, np.array(ctx_vals), TreatmentSeq(matrix, mask, timestamps), int(outcome_s), ite)
    try:
        smp.validate(d, k, s)
    except SchemaError as exc:
        raise SchemaError(f"line {lineno}: {exc}") from None
    return smp


def load_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ParseError("missing header line", line=1)
    d, k, s = _parse_header(lines[0])
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        samples.append(_parse_record(line, lineno, d, k, s))
    ds = Dataset(d, k, s, tuple(samples))
    ds.validate()
    return ds
