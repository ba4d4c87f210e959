"""
Experiment orchestration.

A run has two phases. The fit phase trains, for every fold, the non-UQ
ARMED baseline and each configured posterior backend from the fold's shared
initialization, timing every fit and saving the fitted samplers. The
evaluation phase draws predictions on the train, seen-test and unseen-test
sets, pools metrics, covariate coefficients and prediction confidence
across folds, and assembles an :class:`ExperimentReport`. The ``report``
command reruns only the second phase from saved samplers.
"""

import hashlib
import json
import logging
import re

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from app import __version__
from app.core import metrics
from app.core.armed import (
    ArmedLayout,
    ArmedParams,
    DropoutScope,
    LossWeights,
    TrainingConfig,
    init_armed,
    train_armed,
)
from app.core.coefficients import Averaging, EffectKind, covariate_coefficients
from app.core.config import settings
from app.core.errors import (
    ConfigurationError,
    DataError,
    MetricError,
    NumericError,
)
from app.core.performance import Timer, TimingRecorder
from app.core.simdata import (
    ClusteredDataset,
    CsvSchema,
    FoldPlan,
    GeneratorConfig,
    SplitTag,
    generate,
    load_csv,
    plan_folds,
)
from app.core.stats import (
    METRIC_NAMES,
    Tail,
    calibration_compare,
    classification_metrics,
    model_fit_test,
    pool_samples,
    pool_unseen_confidence,
    prediction_confidence,
    votes_from_probabilities,
)
from app.core.uq import (
    LayerSelection,
    Perturbation,
    PointSampler,
    PosteriorSampler,
    SamplerKind,
    fit_bnn,
    fit_ensemble,
    fit_mc_dropout,
    fit_swag,
    load_sampler,
    posterior_predict,
    save_sampler,
)
from app.core.uq.dropout import DROPOUT_RATES
from app.core.uq.ensemble import ENSEMBLE_FRACTIONS
from app.core.uq.swag import SWAG_LRS

logger = logging.getLogger(__name__)

BASELINE = "armed"
SAMPLER_DIR = "samplers"
MANIFEST = "manifest.json"
CONFIG_FILE = "config.json"

# Fields that place a run rather than change its numbers.
HASH_EXCLUDE = {"out", "parallel"}

EVAL_SPLITS = (SplitTag.TRAIN, SplitTag.SEEN_TEST, SplitTag.UNSEEN_TEST)
CONFIDENCE_SPLITS = (SplitTag.SEEN_TEST, SplitTag.UNSEEN_TEST)

NOTES = (
    "unseen-site confidence sums vote counts over folds before taking the "
    "majority fraction",
    "model-fit p-values are one-sided tests of logit balanced accuracy "
    "against chance; coefficient p-values are two-sided tests against zero",
)


# ---------- Configuration ----------


GRIDS: Dict[SamplerKind, Tuple[Any, ...]] = {
    SamplerKind.BNN_VI: tuple(s.value for s in LayerSelection),
    SamplerKind.SWAG_DIAG: SWAG_LRS,
    SamplerKind.SWAG_FULL: SWAG_LRS,
    SamplerKind.MC_DROPOUT: DROPOUT_RATES,
    SamplerKind.ENSEMBLE_INIT: (),
    SamplerKind.ENSEMBLE_SUBSAMPLE: ENSEMBLE_FRACTIONS,
}

DEFAULT_VALUES: Dict[SamplerKind, Any] = {
    SamplerKind.BNN_VI: LayerSelection.ALL.value,
    SamplerKind.SWAG_DIAG: 1e-2,
    SamplerKind.SWAG_FULL: 1e-2,
    SamplerKind.MC_DROPOUT: 0.1,
    SamplerKind.ENSEMBLE_SUBSAMPLE: 0.9,
}


class DataSource(str, Enum):
    GENERATE = "generate"
    CSV = "csv"


class UnseenPrediction(str, Enum):
    SOFT_MEMBERSHIP = "soft-membership"
    FE_ONLY = "fe-only"


class BackendSpec(BaseModel):
    """One posterior backend and its hyperparameter, written ``kind[:value]``."""

    model_config = ConfigDict(frozen=True)

    kind: SamplerKind
    value: Optional[Union[float, str]] = None

    @model_validator(mode="before")
    @classmethod
    def _normalize(cls, data: Any) -> Any:
        if isinstance(data, str):
            kind, _, value = data.partition(":")
            data = {"kind": kind.strip(), "value": value.strip() or None}
        if not isinstance(data, dict):
            return data
        kind = SamplerKind(data.get("kind"))
        if kind is SamplerKind.NONE:
            raise ValueError("the non-UQ baseline is always run; it is not a backend")
        value = data.get("value")
        if kind is SamplerKind.ENSEMBLE_INIT:
            if value not in (None, ""):
                raise ValueError("ensemble-init takes no value")
            value = None
        elif value is None:
            value = DEFAULT_VALUES[kind]
        elif kind is SamplerKind.BNN_VI:
            value = LayerSelection(str(value)).value
        else:
            value = float(value)
            if not 0.0 < value <= 1.0 and kind is not SamplerKind.MC_DROPOUT:
                raise ValueError(f"{kind.value} value must be in (0, 1], got {value}")
            if kind is SamplerKind.MC_DROPOUT and not 0.0 <= value < 1.0:
                raise ValueError(f"dropout rate must be in [0, 1), got {value}")
        return {"kind": kind, "value": value}

    @property
    def label(self) -> str:
        if self.value is None:
            return self.kind.value
        if isinstance(self.value, float):
            return f"{self.kind.value}:{self.value:g}"
        return f"{self.kind.value}:{self.value}"

    def in_grid(self) -> bool:
        grid = GRIDS[self.kind]
        if not grid:
            return True
        if isinstance(self.value, str):
            return self.value in grid
        return any(np.isclose(self.value, g, rtol=1e-9, atol=0.0) for g in grid)

    @classmethod
    def parse(cls, text: str) -> "BackendSpec":
        try:
            return cls.model_validate(text)
        except (ValidationError, ValueError) as e:
            raise ConfigurationError(f"invalid backend '{text}': {_first_error(e)}") from e


def _first_error(e: Exception) -> str:
    if isinstance(e, ValidationError):
        err = e.errors()[0]
        loc = ".".join(str(p) for p in err.get("loc", ()))
        return f"{loc}: {err['msg']}" if loc else err["msg"]
    return str(e)


class ExperimentConfig(BaseModel):
    """Everything that determines an experiment's numbers, plus where to write them."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = Field(..., ge=0)
    source: DataSource = DataSource.GENERATE
    csv_path: Optional[str] = None
    csv_schema: CsvSchema = Field(default_factory=CsvSchema)
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    folds: int = Field(default_factory=lambda: settings.DEFAULT_FOLDS, ge=2)
    draws: int = Field(default_factory=lambda: settings.DEFAULT_DRAWS, ge=2)
    backends: Tuple[BackendSpec, ...] = ()
    weights: LossWeights = Field(default_factory=LossWeights)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    dropout_scope: DropoutScope = DropoutScope.FE
    unseen_prediction: UnseenPrediction = UnseenPrediction.SOFT_MEMBERSHIP
    coefficient_kinds: Tuple[EffectKind, ...] = (EffectKind.FIXED,)
    coefficient_split: SplitTag = SplitTag.TRAIN
    coefficient_target: Literal["logit", "probability"] = "logit"
    out: str = "results"
    parallel: bool = False
    allow_custom: bool = False

    @field_validator("backends", mode="before")
    @classmethod
    def _parse_backends(cls, v: Any) -> Any:
        if isinstance(v, str):
            v = [v]
        return v

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if self.source is DataSource.CSV and not self.csv_path:
            raise ValueError("csv_path is required when source is 'csv'")
        labels = [b.label for b in self.backends]
        dupes = sorted({x for x in labels if labels.count(x) > 1})
        if dupes:
            raise ValueError(f"duplicate backends: {', '.join(dupes)}")
        if not self.allow_custom:
            off = [b.label for b in self.backends if not b.in_grid()]
            if off:
                raise ValueError(
                    f"outside the tested hyperparameter grid: {', '.join(off)} "
                    "(set allow_custom to run them)"
                )
        if self.coefficient_split is SplitTag.UNSEEN_TEST:
            raise ValueError("coefficients are evaluated on train or seen-test rows")
        return self

    def hashed_dump(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", exclude=HASH_EXCLUDE)

    def config_hash(self) -> str:
        canonical = json.dumps(self.hashed_dump(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config_file(path: str | Path) -> Dict[str, Any]:
    """Read a JSON or TOML config file into a plain mapping."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    try:
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"{path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a table/object")
    return data


def build_config(
    base: Optional[Dict[str, Any]] = None, **overrides: Any
) -> ExperimentConfig:
    """Validate ``base`` updated with the non-None ``overrides``."""
    data = dict(base or {})
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid configuration: {_first_error(e)}") from e


# ---------- Report types ----------


class ModelStatus(str, Enum):
    OK = "ok"
    FAILED = "failed"


@dataclass
class ModelRecord:
    label: str
    kind: SamplerKind
    value: Optional[Union[float, str]] = None
    status: ModelStatus = ModelStatus.OK
    error: Optional[str] = None
    failed_fold: Optional[int] = None

    def fail(self, fold: Optional[int], error: Exception) -> None:
        self.status = ModelStatus.FAILED
        self.error = str(error)
        self.failed_fold = fold

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "kind": self.kind.value,
            "value": self.value,
            "status": self.status.value,
            "error": self.error,
            "failed_fold": self.failed_fold,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelRecord":
        return cls(
            label=data["label"],
            kind=SamplerKind(data["kind"]),
            value=data.get("value"),
            status=ModelStatus(data.get("status", "ok")),
            error=data.get("error"),
            failed_fold=data.get("failed_fold"),
        )


@dataclass
class FittedModels:
    records: Dict[str, ModelRecord]
    samplers: Dict[str, List[PosteriorSampler]]
    train_seconds: Dict[str, List[float]] = field(default_factory=dict)


@dataclass
class ExperimentReport:
    config: Dict[str, Any]
    config_hash: str
    seed: int
    version: str
    dataset: Dict[str, Any]
    models: List[ModelRecord]
    performance: List[Dict[str, Any]] = field(default_factory=list)
    covariates: List[Dict[str, Any]] = field(default_factory=list)
    confidence: List[Dict[str, Any]] = field(default_factory=list)
    timing: List[Dict[str, Any]] = field(default_factory=list)
    notes: Tuple[str, ...] = NOTES

    def to_dict(self) -> Dict[str, Any]:
        """Everything but wall-clock timing, which varies between runs."""
        return {
            "provenance": {
                "config_hash": self.config_hash,
                "seed": self.seed,
                "version": self.version,
            },
            "config": self.config,
            "dataset": self.dataset,
            "models": [m.to_dict() for m in self.models],
            "performance": self.performance,
            "covariates": self.covariates,
            "confidence": self.confidence,
            "notes": list(self.notes),
        }


# ---------- Fit phase ----------


def load_dataset(cfg: ExperimentConfig) -> ClusteredDataset:
    if cfg.source is DataSource.CSV:
        return load_csv(cfg.csv_path, cfg.csv_schema)
    return generate(cfg.generator.model_copy(update={"seed": cfg.seed}))


def _safe_label(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", label)


def sampler_path(out: Path, label: str, fold: int) -> Path:
    return out / SAMPLER_DIR / _safe_label(label) / f"fold_{fold:02d}.npz"


def _workers(cfg: ExperimentConfig) -> int:
    return max(settings.WORKERS, 1) if cfg.parallel else 1


def fit_backend(
    spec: BackendSpec,
    cfg: ExperimentConfig,
    train: ClusteredDataset,
    init: ArmedParams,
    fold: int,
) -> PosteriorSampler:
    common = dict(seed=cfg.seed, fold=fold, draws=cfg.draws, init=init)
    kind = spec.kind
    if kind is SamplerKind.BNN_VI:
        return fit_bnn(train, cfg.training, cfg.weights, selection=spec.value, **common)
    if kind in (SamplerKind.SWAG_DIAG, SamplerKind.SWAG_FULL):
        return fit_swag(
            train,
            cfg.training,
            cfg.weights,
            lr=float(spec.value),
            full=kind is SamplerKind.SWAG_FULL,
            **common,
        )
    if kind is SamplerKind.MC_DROPOUT:
        return fit_mc_dropout(
            train,
            cfg.training,
            cfg.weights,
            rate=float(spec.value),
            scope=cfg.dropout_scope,
            **common,
        )
    perturbation = (
        Perturbation.RANDOM_INIT
        if kind is SamplerKind.ENSEMBLE_INIT
        else Perturbation.SUBSAMPLE
    )
    return fit_ensemble(
        train,
        cfg.training,
        cfg.weights,
        perturbation=perturbation,
        fraction=1.0 if spec.value is None else float(spec.value),
        workers=_workers(cfg),
        **common,
    )


def fit_models(
    cfg: ExperimentConfig,
    data: ClusteredDataset,
    plan: FoldPlan,
    recorder: TimingRecorder,
    out: Optional[Path] = None,
) -> FittedModels:
    """Train the baseline and every backend on every fold.

    A model whose training fails numerically (or cannot be fitted on the
    fold's data) is marked failed and skipped for the remaining folds.
    """
    specs: List[Optional[BackendSpec]] = [None, *cfg.backends]
    records = {
        BASELINE: ModelRecord(BASELINE, SamplerKind.NONE),
        **{s.label: ModelRecord(s.label, s.kind, s.value) for s in cfg.backends},
    }
    samplers: Dict[str, List[PosteriorSampler]] = {label: [] for label in records}
    seconds: Dict[str, List[float]] = {label: [] for label in records}

    for fold in plan.folds:
        train = data.subset(fold.train)
        layout = ArmedLayout.from_training(train.n_features, train.Z.shape[1], cfg.training)
        init = init_armed(layout, cfg.seed, fold.index)
        logger.info(f"fold {fold.index}: {train.n_samples} training rows")
        for spec in specs:
            label = BASELINE if spec is None else spec.label
            record = records[label]
            if record.status is ModelStatus.FAILED:
                continue
            try:
                with Timer(recorder, label, "train") as timer:
                    if spec is None:
                        fit = train_armed(
                            train,
                            cfg.training,
                            cfg.weights,
                            seed=cfg.seed,
                            fold=fold.index,
                            init=init,
                        )
                        sampler: PosteriorSampler = PointSampler(
                            fit.params, cfg.seed, fold.index
                        )
                        sampler.history = list(fit.history)
                    else:
                        sampler = fit_backend(spec, cfg, train, init, fold.index)
            except (NumericError, DataError) as e:
                logger.error(f"{label} failed on fold {fold.index}: {e}")
                record.fail(fold.index, e)
                samplers[label] = []
                metrics.count_failure(record.kind.value)
                continue
            seconds[label].append(timer.seconds)
            metrics.observe_training(record.kind.value, timer.seconds)
            samplers[label].append(sampler)
            if out is not None:
                save_sampler(sampler, sampler_path(out, label, fold.index))
            logger.info(f"fold {fold.index}: {label} trained in {timer.seconds:.2f}s")

    fitted = FittedModels(records, samplers, seconds)
    if out is not None:
        write_manifest(fitted, plan, out)
    return fitted


def write_manifest(fitted: FittedModels, plan: FoldPlan, out: Path) -> Path:
    path = out / SAMPLER_DIR / MANIFEST
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "folds": plan.k,
        "models": [r.to_dict() for r in fitted.records.values()],
        "train_seconds": fitted.train_seconds,
    }
    try:
        path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e
    return path


def load_fitted(out: Path, plan: FoldPlan) -> FittedModels:
    path = out / SAMPLER_DIR / MANIFEST
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if doc.get("folds") != plan.k:
        raise DataError(f"{path}: saved for {doc.get('folds')} folds, config has {plan.k}")
    records = {m["label"]: ModelRecord.from_dict(m) for m in doc["models"]}
    samplers: Dict[str, List[PosteriorSampler]] = {}
    for label, record in records.items():
        if record.status is ModelStatus.FAILED:
            samplers[label] = []
            continue
        samplers[label] = [
            load_sampler(sampler_path(out, label, f.index)) for f in plan.folds
        ]
    return FittedModels(records, samplers, doc.get("train_seconds", {}))


# ---------- Evaluation phase ----------


@dataclass
class SplitDraws:
    """Per-draw positive-class probabilities of one split in one fold."""

    probs: np.ndarray  # S x n
    labels: np.ndarray
    subjects: Tuple[str, ...]


def _split_sets(
    data: ClusteredDataset, plan: FoldPlan
) -> List[Dict[SplitTag, ClusteredDataset]]:
    unseen = data.subset(plan.unseen)
    return [
        {
            SplitTag.TRAIN: data.subset(f.train),
            SplitTag.SEEN_TEST: data.subset(f.test),
            SplitTag.UNSEEN_TEST: unseen,
        }
        for f in plan.folds
    ]


def predict_splits(
    sampler: PosteriorSampler,
    sets: Dict[SplitTag, ClusteredDataset],
    workers: int = 1,
    unseen: UnseenPrediction = UnseenPrediction.SOFT_MEMBERSHIP,
) -> Dict[SplitTag, SplitDraws]:
    out = {}
    fe_only = unseen is UnseenPrediction.FE_ONLY
    for split, s in sets.items():
        if s.n_samples == 0:
            continue
        if split is SplitTag.UNSEEN_TEST:
            draws = posterior_predict(
                sampler, s.X, None, fe_only=fe_only, workers=workers
            )
        else:
            draws = posterior_predict(sampler, s.X, s.Z, workers=workers)
        out[split] = SplitDraws(draws.y_M, np.asarray(s.y), tuple(s.subject_ids))
    return out


def _draw_metrics(d: SplitDraws) -> Dict[str, np.ndarray]:
    rows = [classification_metrics(p, d.labels) for p in d.probs]
    return {name: np.array([r[name] for r in rows]) for name in METRIC_NAMES}


def _clean(v: Any) -> Any:
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def performance_rows(
    label: str, per_fold: List[Dict[SplitTag, SplitDraws]], draws: int
) -> List[Dict[str, Any]]:
    rows = []
    for split in EVAL_SPLITS:
        fold_metrics = []
        skipped = 0
        for fold_draws in per_fold:
            if split not in fold_draws:
                continue
            try:
                fold_metrics.append(_draw_metrics(fold_draws[split]))
            except MetricError:
                skipped += 1
        if not fold_metrics:
            continue
        row: Dict[str, Any] = {"model": label, "split": split.value}
        testable = draws >= 2
        for name in METRIC_NAMES:
            samples = [m[name] for m in fold_metrics]
            if testable:
                stat = pool_samples(samples, tail=Tail.TWO_SIDED)
                row[name] = stat.mean
                row[f"{name}_ci_low"] = stat.ci_low
                row[f"{name}_ci_high"] = stat.ci_high
            else:
                row[name] = float(np.mean([s.mean() for s in samples]))
                row[f"{name}_ci_low"] = None
                row[f"{name}_ci_high"] = None
        flags = []
        if testable:
            fit = model_fit_test([m["balanced_accuracy"] for m in fold_metrics])
            row.update(
                model_fit_t=_clean(fit.t),
                model_fit_df=fit.df,
                model_fit_p=fit.p,
            )
            flags.extend(fit.flags)
        else:
            row.update(model_fit_t=None, model_fit_df=None, model_fit_p=None)
        if skipped:
            flags.append(f"single-class-folds-skipped={skipped}")
        row["folds"] = len(fold_metrics)
        row["flags"] = ";".join(flags)
        rows.append(row)
    return rows


def confidence_rows(
    label: str, per_fold: List[Dict[SplitTag, SplitDraws]]
) -> List[Dict[str, Any]]:
    rows = []
    for split in CONFIDENCE_SPLITS:
        records = []
        if split is SplitTag.SEEN_TEST:
            for fold_draws in per_fold:
                d = fold_draws.get(split)
                if d is None:
                    continue
                for i, votes in enumerate(votes_from_probabilities(d.probs)):
                    rec = prediction_confidence(votes)
                    records.append((rec, rec.predicted == int(d.labels[i])))
        else:
            folds = [f[split] for f in per_fold if split in f]
            if folds:
                fold_votes = [votes_from_probabilities(d.probs) for d in folds]
                for i in range(len(folds[0].labels)):
                    rec = pool_unseen_confidence([v[i] for v in fold_votes])
                    records.append((rec, rec.predicted == int(folds[0].labels[i])))
        if not records:
            continue
        conf = np.array([r.confidence for r, _ in records])
        correct = [ok for _, ok in records]
        result = calibration_compare(conf, correct)
        rows.append(
            {
                "model": label,
                "split": split.value,
                "n": len(records),
                "mean_confidence": float(conf.mean()),
                "ties": int(sum(r.tie for r, _ in records)),
                **result.to_dict(),
            }
        )
    return rows


def covariate_rows(
    label: str,
    samplers: Sequence[PosteriorSampler],
    eval_sets: Sequence[ClusteredDataset],
    cfg: ExperimentConfig,
) -> List[Dict[str, Any]]:
    rows = []
    pairs = list(zip(samplers, eval_sets))
    for kind in cfg.coefficient_kinds:
        for averaging in Averaging:
            coefs = covariate_coefficients(pairs, kind, averaging, cfg.coefficient_target)
            rows.extend({"model": label, **c.to_dict()} for c in coefs)
    return rows


def dataset_summary(data: ClusteredDataset, plan: FoldPlan) -> Dict[str, Any]:
    return {
        "n_samples": data.n_samples,
        "n_features": data.n_features,
        "n_clusters": len(data.cluster_labels),
        "n_seen_clusters": data.n_seen,
        "n_unseen_samples": int(plan.unseen.size),
        "positive_rate": float(np.mean(data.y)),
        "probe_features": [data.feature_names[j] for j in data.probe_columns],
        "informative_features": [data.feature_names[j] for j in data.informative],
        "folds": plan.k,
    }


def evaluate_models(
    cfg: ExperimentConfig,
    data: ClusteredDataset,
    plan: FoldPlan,
    fitted: FittedModels,
    recorder: TimingRecorder,
) -> ExperimentReport:
    sets = _split_sets(data, plan)
    coef_sets = [s[cfg.coefficient_split] for s in sets]
    workers = _workers(cfg)
    unseen_note = f"unseen-site predictions use {cfg.unseen_prediction.value}"
    report = ExperimentReport(
        config=cfg.hashed_dump(),
        config_hash=cfg.config_hash(),
        seed=cfg.seed,
        version=__version__,
        dataset=dataset_summary(data, plan),
        models=list(fitted.records.values()),
        notes=(*NOTES, unseen_note),
    )
    for label, record in fitted.records.items():
        samplers = fitted.samplers.get(label) or []
        if record.status is ModelStatus.FAILED or not samplers:
            continue
        per_fold: List[Dict[SplitTag, SplitDraws]] = []
        try:
            for fold, sampler in zip(plan.folds, samplers):
                with Timer(recorder, label, "inference") as timer:
                    per_fold.append(
                        predict_splits(
                            sampler, sets[fold.index], workers, cfg.unseen_prediction
                        )
                    )
                metrics.observe_inference(record.kind.value, timer.seconds)
            draws = samplers[0].draws
            perf = performance_rows(label, per_fold, draws)
            conf = confidence_rows(label, per_fold) if draws >= 2 else []
            covs = covariate_rows(label, samplers, coef_sets, cfg)
        except NumericError as e:
            logger.error(f"{label} failed during evaluation: {e}")
            record.fail(None, e)
            metrics.count_failure(record.kind.value)
            continue
        report.performance.extend(perf)
        report.confidence.extend(conf)
        report.covariates.extend(covs)
        logger.info(f"{label}: evaluated over {len(per_fold)} folds")

    for label, secs in fitted.train_seconds.items():
        if not recorder.samples(label, "train"):
            for s in secs:
                recorder.record(label, "train", s)
    report.timing = recorder.rows()
    return report


# ---------- Entry points ----------


def run_experiment(
    cfg: ExperimentConfig,
    recorder: Optional[TimingRecorder] = None,
    save: bool = True,
) -> ExperimentReport:
    """Fit every model on every fold, then evaluate and pool."""
    recorder = recorder or TimingRecorder()
    metrics.init_metrics()
    data = load_dataset(cfg)
    plan = plan_folds(data, cfg.folds, cfg.seed)
    out = Path(cfg.out) if save else None
    if out is not None:
        write_config(cfg, out)
    logger.info(
        f"experiment {cfg.config_hash()[:12]}: {len(cfg.backends)} backends + baseline, "
        f"{plan.k} folds, {cfg.draws} draws"
    )
    fitted = fit_models(cfg, data, plan, recorder, out)
    return evaluate_models(cfg, data, plan, fitted, recorder)


def write_config(cfg: ExperimentConfig, out: Path) -> Path:
    path = out / CONFIG_FILE
    try:
        out.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True),
            encoding="utf-8",
        )
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e
    return path


def rerun_report(
    out: str | Path, recorder: Optional[TimingRecorder] = None
) -> ExperimentReport:
    """Evaluate again from the samplers and config saved under ``out``."""
    out = Path(out)
    recorder = recorder or TimingRecorder()
    metrics.init_metrics()
    cfg = build_config(load_config_file(out / CONFIG_FILE), out=str(out))
    data = load_dataset(cfg)
    plan = plan_folds(data, cfg.folds, cfg.seed)
    fitted = load_fitted(out, plan)
    return evaluate_models(cfg, data, plan, fitted, recorder)
