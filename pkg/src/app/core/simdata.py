"""
Clustered binary-classification data.

Synthetic generator with site-level random effects and planted confound
probes, cluster-stratified fold planning over seen sites, and CSV
ingestion/export for real tabular data.
"""

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import brentq
from scipy.special import expit, logit
from sklearn.model_selection import StratifiedKFold

from app.core import seeding
from app.core.errors import (
    ArgumentError,
    CsvParseError,
    DataError,
    SplitError,
    StratificationError,
)

logger = logging.getLogger(__name__)

N_PROBES = 5
META_SUFFIX = ".meta.json"
SPLIT_COLUMN = "split"
SUBJECT_COLUMN = "subject"
META_FORMAT_VERSION = 1


class FeatureKind(str, Enum):
    BIOLOGICAL = "biological"
    PROBE = "probe"


class SplitTag(str, Enum):
    TRAIN = "train"
    SEEN_TEST = "seen-test"
    UNSEEN_TEST = "unseen-test"


# ---------- Dataset ----------


def _frozen(arr: np.ndarray, dtype=None) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    """Feature matrix, targets and cluster design for one study.

    ``cluster_ids`` index into ``cluster_labels``. ``seen_clusters`` lists the
    cluster indices that are available for training; ``Z`` is one-hot over
    those, in that order, and all-zero for rows of unseen clusters.
    """

    X: np.ndarray
    y: np.ndarray
    cluster_ids: np.ndarray
    cluster_labels: Tuple[str, ...]
    seen_clusters: Tuple[int, ...]
    feature_names: Tuple[str, ...]
    feature_kinds: Tuple[FeatureKind, ...]
    split: np.ndarray
    subject_ids: Tuple[str, ...]
    outcome_prob: Optional[np.ndarray] = None
    informative: Tuple[int, ...] = ()
    Z: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        n = len(self.y)
        X = _frozen(self.X, np.float64)
        if X.ndim != 2 or X.shape[0] != n:
            raise DataError(f"feature matrix shape {X.shape} does not match {n} targets")
        if len(self.feature_names) != X.shape[1] or len(self.feature_kinds) != X.shape[1]:
            raise DataError("feature metadata does not match the number of columns")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", _frozen(self.y, np.int64))
        object.__setattr__(self, "cluster_ids", _frozen(self.cluster_ids, np.int64))
        object.__setattr__(self, "split", _frozen(self.split, "<U11"))
        kinds = tuple(FeatureKind(k) for k in self.feature_kinds)
        object.__setattr__(self, "feature_kinds", kinds)
        if self.outcome_prob is not None:
            object.__setattr__(self, "outcome_prob", _frozen(self.outcome_prob, np.float64))
        column = {c: j for j, c in enumerate(self.seen_clusters)}
        Z = np.zeros((n, len(self.seen_clusters)))
        for i, c in enumerate(self.cluster_ids):
            j = column.get(int(c))
            if j is not None:
                Z[i, j] = 1.0
        object.__setattr__(self, "Z", _frozen(Z))

    @property
    def n_samples(self) -> int:
        return int(self.X.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.X.shape[1])

    @property
    def n_seen(self) -> int:
        return len(self.seen_clusters)

    @property
    def seen_mask(self) -> np.ndarray:
        return np.isin(self.cluster_ids, np.asarray(self.seen_clusters, dtype=np.int64))

    @property
    def probe_columns(self) -> List[int]:
        return [j for j, k in enumerate(self.feature_kinds) if k is FeatureKind.PROBE]

    def subset(self, idx: Sequence[int]) -> "ClusteredDataset":
        """Rows ``idx``; cluster bookkeeping (and Z columns) are unchanged."""
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            X=self.X[idx],
            y=self.y[idx],
            cluster_ids=self.cluster_ids[idx],
            split=self.split[idx],
            subject_ids=tuple(self.subject_ids[i] for i in idx),
            outcome_prob=None if self.outcome_prob is None else self.outcome_prob[idx],
        )

    def with_split(self, split: Sequence[str]) -> "ClusteredDataset":
        return replace(self, split=np.asarray(split))

    def cluster_sizes(self) -> Dict[str, int]:
        counts = np.bincount(self.cluster_ids, minlength=len(self.cluster_labels))
        return {label: int(counts[i]) for i, label in enumerate(self.cluster_labels)}


def _zscore(X: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Standardize columns with mean/sd (ddof 0) of ``rows``; constant columns centre only."""
    ref = X[rows]
    mean = ref.mean(axis=0)
    sd = ref.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (X - mean) / sd


# ---------- Generator ----------


class GeneratorConfig(BaseModel):
    """Synthetic study design. Defaults give roughly 700 samples over 34 sites."""

    model_config = ConfigDict(frozen=True)

    n_clusters: int = Field(34, ge=2)
    n_seen: int = Field(20, ge=1)
    samples_mean: float = Field(35.0, gt=0)
    samples_min: int = Field(12, ge=1)
    d_bio: int = Field(20, ge=1)
    k_informative: int = Field(6, ge=0)
    sigma_mu0: float = Field(1.0, ge=0)
    sigma_mu1: float = Field(0.5, ge=0)
    fe_strength: float = Field(1.0, ge=0)
    nonlinearity: float = Field(1.0, ge=0)
    base_rate: float = Field(0.30, gt=0, lt=1)
    feature_shift_sd: float = Field(0.3, ge=0)
    probes: bool = True
    probe_noise: float = Field(0.1, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_sizes(self) -> "GeneratorConfig":
        if self.n_seen > self.n_clusters:
            raise ValueError("n_seen must not exceed n_clusters")
        if self.k_informative > self.d_bio:
            raise ValueError("k_informative must not exceed d_bio")
        return self


def _fixed_effect(x_inf: np.ndarray, beta: np.ndarray, cfg: GeneratorConfig) -> np.ndarray:
    if x_inf.shape[1] == 0:
        return np.zeros(x_inf.shape[0])
    linear = x_inf @ beta
    # tanh warp replaces the linear effect of the first informative feature
    warped = beta[0] * (1.5 * np.tanh(1.5 * x_inf[:, 0]) - x_inf[:, 0])
    pair = 0.5 * x_inf[:, 1] * x_inf[:, 2] if x_inf.shape[1] >= 3 else 0.0
    return cfg.fe_strength * (linear + cfg.nonlinearity * (warped + pair))


def _calibrate_intercept(offset: np.ndarray, base_rate: float) -> float:
    def gap(b: float) -> float:
        return float(np.mean(expit(b + offset))) - base_rate

    return float(brentq(gap, -50.0, 50.0, xtol=1e-12))


def generate(cfg: GeneratorConfig) -> ClusteredDataset:
    """Draw one synthetic clustered study.

    Latent logit per sample of cluster j:
    ``b + f_FE(x_inf) + mu0_j + sum(mu1_j * x_inf)``, with the intercept ``b``
    calibrated so the mean outcome probability equals ``cfg.base_rate``.
    """
    for name in ("sigma_mu0", "sigma_mu1", "probe_noise", "feature_shift_sd"):
        if not np.isfinite(getattr(cfg, name)):
            raise ArgumentError(f"{name} must be finite")

    rng = seeding.stream(cfg.seed, seeding.GENERATOR)
    C, d, k = cfg.n_clusters, cfg.d_bio, cfg.k_informative
    sizes = np.maximum(rng.poisson(cfg.samples_mean, C), cfg.samples_min)
    cluster_ids = np.repeat(np.arange(C), sizes)
    n = int(sizes.sum())

    shift = rng.normal(0.0, cfg.feature_shift_sd, (C, d))
    X_raw = rng.normal(size=(n, d)) + shift[cluster_ids]

    informative = np.sort(rng.choice(d, size=k, replace=False)) if k else np.array([], int)
    beta = rng.choice([-1.0, 1.0], size=k) * rng.uniform(0.5, 1.0, size=k)
    mu0 = rng.normal(0.0, cfg.sigma_mu0, C)
    mu1 = rng.normal(0.0, cfg.sigma_mu1, (C, k))

    x_inf = X_raw[:, informative]
    offset = (
        _fixed_effect(x_inf, beta, cfg)
        + mu0[cluster_ids]
        + np.sum(mu1[cluster_ids] * x_inf, axis=1)
    )
    intercept = _calibrate_intercept(offset, cfg.base_rate)
    prob = expit(intercept + offset)
    y = (rng.random(n) < prob).astype(np.int64)

    order = sorted(range(C), key=lambda c: (-int(sizes[c]), c))
    seen = tuple(sorted(order[: cfg.n_seen]))
    seen_mask = np.isin(cluster_ids, seen)
    split = np.where(seen_mask, SplitTag.TRAIN.value, SplitTag.UNSEEN_TEST.value)

    data = ClusteredDataset(
        X=_zscore(X_raw, np.flatnonzero(seen_mask)),
        y=y,
        cluster_ids=cluster_ids,
        cluster_labels=tuple(f"site-{c:02d}" for c in range(C)),
        seen_clusters=seen,
        feature_names=tuple(f"bio_{j:02d}" for j in range(d)),
        feature_kinds=(FeatureKind.BIOLOGICAL,) * d,
        split=split,
        subject_ids=tuple(f"s{i:05d}" for i in range(n)),
        outcome_prob=prob,
        informative=tuple(int(j) for j in informative),
    )
    logger.info(
        f"Generated {n} samples over {C} clusters ({len(seen)} seen), "
        f"positive rate {y.mean():.3f}"
    )
    if cfg.probes:
        data = attach_probes(data, cfg.seed, noise=cfg.probe_noise)
    return data


# ---------- Probes ----------

# Positive site maps g_m(e) and monotone outcome maps h_m(p).
_SITE_MAPS = (
    lambda e: e**2 + 0.25,
    lambda e: 1.5 + np.sin(2.0 * e),
    lambda e: np.where(e > 0.0, 2.0, 0.5),
    lambda e: np.exp(0.5 * e),
    lambda e: 1.0 + np.abs(e),
)
_OUTCOME_MAPS = (
    lambda p: logit(np.clip(p, 1e-6, 1 - 1e-6)),
    lambda p: p**2,
    lambda p: np.sqrt(p),
    lambda p: np.tanh(3.0 * (p - 0.5)),
    lambda p: p,
)


def attach_probes(
    data: ClusteredDataset, seed: int, noise: float = 0.1
) -> ClusteredDataset:
    """Append five confound probes tied to site and outcome probability.

    ``probe_m = g_m(e_jm) * h_m(p) + noise * N(0, 1)`` with a per-cluster
    embedding ``e_jm`` drawn from ``seed``. Columns are standardized on the
    training rows and tagged ``probe``.
    """
    if data.outcome_prob is None:
        raise ArgumentError("attach_probes needs a per-sample outcome probability")
    if noise < 0 or not np.isfinite(noise):
        raise ArgumentError(f"probe noise must be a finite non-negative number, got {noise}")
    rng = seeding.stream(seed, seeding.PROBES)
    emb = rng.normal(size=(len(data.cluster_labels), N_PROBES))
    p = data.outcome_prob
    cols = []
    for m in range(N_PROBES):
        g = _SITE_MAPS[m](emb[data.cluster_ids, m])
        h = _OUTCOME_MAPS[m](p)
        cols.append(g * h + noise * rng.normal(size=data.n_samples))
    probes = _zscore(np.column_stack(cols), _reference_rows(data))
    return replace(
        data,
        X=np.hstack([data.X, probes]),
        feature_names=data.feature_names + tuple(f"probe_{m}" for m in range(N_PROBES)),
        feature_kinds=data.feature_kinds + (FeatureKind.PROBE,) * N_PROBES,
    )


def _reference_rows(data: ClusteredDataset) -> np.ndarray:
    rows = np.flatnonzero(data.split == SplitTag.TRAIN.value)
    return rows if rows.size else np.arange(data.n_samples)


def empirical_outcome_prob(data: ClusteredDataset) -> np.ndarray:
    """Per-sample positive rate of the sample's own cluster."""
    totals = np.bincount(data.cluster_ids, weights=data.y, minlength=len(data.cluster_labels))
    counts = np.bincount(data.cluster_ids, minlength=len(data.cluster_labels))
    rates = totals / np.maximum(counts, 1)
    return rates[data.cluster_ids]


# ---------- Folds ----------


@dataclass(frozen=True)
class Fold:
    index: int
    train: np.ndarray
    test: np.ndarray


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: Tuple[Fold, ...]
    unseen: np.ndarray

    def to_dict(self) -> Dict[str, object]:
        return {
            "k": self.k,
            "folds": [
                {"index": f.index, "train": f.train.tolist(), "test": f.test.tolist()}
                for f in self.folds
            ],
            "unseen": self.unseen.tolist(),
        }


def plan_folds(data: ClusteredDataset, k: int, seed: int = 0) -> FoldPlan:
    """Cluster-stratified k-fold over seen-site samples; unseen sites set aside."""
    if k < 2:
        raise ArgumentError(f"fold count must be at least 2, got {k}")
    seen_idx = np.flatnonzero(data.seen_mask)
    unseen_idx = np.flatnonzero(~data.seen_mask)
    labels = data.cluster_ids[seen_idx]
    counts = np.bincount(labels, minlength=len(data.cluster_labels))
    for c in data.seen_clusters:
        if counts[c] < k:
            raise StratificationError(data.cluster_labels[c], int(counts[c]), k)
    skf = StratifiedKFold(
        n_splits=k, shuffle=True, random_state=seeding.derive_seed(seed, seeding.FOLDS)
    )
    folds = tuple(
        Fold(i, np.sort(seen_idx[tr]), np.sort(seen_idx[te]))
        for i, (tr, te) in enumerate(skf.split(seen_idx, labels))
    )
    return FoldPlan(k, folds, unseen_idx)


# ---------- CSV ----------


class CsvSchema(BaseModel):
    """Column roles of an ingested CSV. Every other column is a feature."""

    model_config = ConfigDict(frozen=True)

    target: str = "target"
    cluster: str = "cluster"
    split: Optional[str] = None
    subject: Optional[str] = None
    probe_columns: Tuple[str, ...] = ()
    n_seen: Optional[int] = Field(None, ge=1)


def _read_sidecar(path: Path) -> Dict[str, object]:
    meta_path = Path(str(path) + META_SUFFIX)
    if not meta_path.exists():
        return {}
    try:
        return json.loads(meta_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"{meta_path}: unreadable metadata ({e})") from e


def _parse_number(path: Path, row: int, column: str, value: str) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise CsvParseError(str(path), row, column, value) from None
    if not np.isfinite(out):
        raise CsvParseError(str(path), row, column, value)
    return out


def load_csv(path: str | Path, schema: Optional[CsvSchema] = None) -> ClusteredDataset:
    """Read a clustered dataset from CSV.

    Rows are reported by their 1-based line number (the header is line 1).
    Features are standardized with statistics of the training rows only.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    meta = _read_sidecar(path)
    probe_names = set(schema.probe_columns) | set(meta.get("probe_columns", []))

    try:
        with path.open(newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            header = list(reader.fieldnames or [])
            rows = list(reader)
    except OSError as e:
        raise DataError(f"{path}: {e}") from e

    for required in (schema.target, schema.cluster, schema.split, schema.subject):
        if required is not None and required not in header:
            raise DataError(f"{path}: missing column '{required}'")
    # Unnamed split/subject roles are picked up from same-named header columns.
    split_col = schema.split or (SPLIT_COLUMN if SPLIT_COLUMN in header else None)
    subject_col = schema.subject or (
        SUBJECT_COLUMN if SUBJECT_COLUMN in header else None
    )
    roles = {schema.target, schema.cluster, split_col, subject_col}
    features = [c for c in header if c not in roles]
    if not features:
        raise DataError(f"{path}: no feature columns")

    X = np.empty((len(rows), len(features)))
    y = np.empty(len(rows), dtype=np.int64)
    raw_clusters: List[str] = []
    raw_split: List[str] = []
    subjects: List[str] = []
    for i, rec in enumerate(rows):
        line = i + 2
        target = _parse_number(path, line, schema.target, rec[schema.target])
        if target not in (0.0, 1.0):
            raise DataError(
                f"{path}: row {line}: target must be 0 or 1, got {rec[schema.target]!r}"
            )
        y[i] = int(target)
        for j, col in enumerate(features):
            X[i, j] = _parse_number(path, line, col, rec[col])
        raw_clusters.append(str(rec[schema.cluster]))
        raw_split.append(rec[split_col] if split_col else SplitTag.TRAIN.value)
        subjects.append(rec[subject_col] if subject_col else f"row{line}")

    labels = tuple(sorted(set(raw_clusters)))
    index = {c: i for i, c in enumerate(labels)}
    cluster_ids = np.array([index[c] for c in raw_clusters], dtype=np.int64)
    known = {t.value for t in SplitTag}
    for i, tag in enumerate(raw_split):
        if tag not in known:
            raise SplitError(f"{path}: row {i + 2}: unknown split tag {tag!r}")
    split = np.array(raw_split, dtype="<U11")

    if split_col:
        seen = sorted({int(c) for c in cluster_ids[split == SplitTag.TRAIN.value]})
        for i, (c, tag) in enumerate(zip(cluster_ids, split)):
            if tag == SplitTag.SEEN_TEST.value and int(c) not in seen:
                raise SplitError(
                    f"{path}: row {i + 2}: cluster '{labels[c]}' is tagged seen-test "
                    "but never appears in training rows"
                )
            if tag == SplitTag.UNSEEN_TEST.value and int(c) in seen:
                raise SplitError(
                    f"{path}: row {i + 2}: cluster '{labels[c]}' is tagged unseen-test "
                    "but appears in training rows"
                )
    else:
        counts = np.bincount(cluster_ids, minlength=len(labels))
        if schema.n_seen is not None and schema.n_seen < len(labels):
            order = sorted(range(len(labels)), key=lambda c: (-int(counts[c]), c))
            seen = sorted(order[: schema.n_seen])
        else:
            seen = list(range(len(labels)))
        split = np.where(
            np.isin(cluster_ids, seen), SplitTag.TRAIN.value, SplitTag.UNSEEN_TEST.value
        )

    train_rows = np.flatnonzero(split == SplitTag.TRAIN.value)
    if train_rows.size == 0:
        raise SplitError(f"{path}: no training rows")
    data = ClusteredDataset(
        X=_zscore(X, train_rows),
        y=y,
        cluster_ids=cluster_ids,
        cluster_labels=labels,
        seen_clusters=tuple(seen),
        feature_names=tuple(features),
        feature_kinds=tuple(
            FeatureKind.PROBE if c in probe_names else FeatureKind.BIOLOGICAL
            for c in features
        ),
        split=split,
        subject_ids=tuple(subjects),
        informative=tuple(int(j) for j in meta.get("informative", [])),
    )
    data = replace(data, outcome_prob=empirical_outcome_prob(data))
    logger.info(
        f"Loaded {data.n_samples} rows, {data.n_features} features, "
        f"{len(labels)} clusters ({len(seen)} seen) from {path}"
    )
    return data


def write_csv(data: ClusteredDataset, path: str | Path) -> Path:
    """Write ``data`` as CSV plus a ``.meta.json`` sidecar listing probe columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [SUBJECT_COLUMN, "cluster", SPLIT_COLUMN, "target", *data.feature_names]
    try:
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for i in range(data.n_samples):
                writer.writerow(
                    [
                        data.subject_ids[i],
                        data.cluster_labels[data.cluster_ids[i]],
                        data.split[i],
                        int(data.y[i]),
                        *(repr(float(v)) for v in data.X[i]),
                    ]
                )
        meta = {
            "format_version": META_FORMAT_VERSION,
            "probe_columns": [data.feature_names[j] for j in data.probe_columns],
            "informative": list(data.informative),
            "seen_clusters": [data.cluster_labels[c] for c in data.seen_clusters],
        }
        Path(str(path) + META_SUFFIX).write_text(
            json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8"
        )
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    return path


# Schema matching the files written by write_csv.
WRITTEN_SCHEMA = CsvSchema(split=SPLIT_COLUMN, subject=SUBJECT_COLUMN)
