"""Minibatch training, stratified cross-validation and the ablation grid."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import prior as prior_mod
from .graph import KnnGraph, SymmetricGraph, build_knn_graph, symmetrize
from .losses import LossWeights, cls_loss, collect_batch_edges, prior_loss, rel_loss
from .metrics import METRIC_NAMES, EvalReport, evaluate, youden_threshold
from .prior import PriorSet
from .student import StudentParams, backward, forward, init_student, predict_proba
from .tabular import (
    CohortTable,
    RawCohortFile,
    Scaler,
    apply_preprocessor,
    assert_disjoint,
    fit_preprocessor,
    stack_raw,
)

log = logging.getLogger(__name__)

PRIOR_MODES = ("gated_knn", "ungated_knn", "global_mean", "global_class_mean")
OPTIMIZERS = ("adam", "sgd")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 1e-4
    lambda_cls: float = 1.0
    lambda_prior: float = 1.0
    lambda_rel: float = 1.0
    k_mri: int = 20
    k_fundus: int = 5
    sigma: float = 1.0
    alpha: float = 0.9
    seed: int = 0
    distill: bool = True
    smooth: bool = True
    rel: bool = True
    prior_mode: str = "gated_knn"
    optimizer: str = "adam"
    n_folds: int = 5
    embed_dim: int = 64
    bio_dim: int = 16
    hidden_dim: int = 64
    shared_scaler: bool = True
    rel_use_normalized: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        LossWeights(self.lambda_cls, self.lambda_prior, self.lambda_rel)

    @property
    def weights(self) -> LossWeights:
        """Loss weights after applying the ablation switches."""
        return LossWeights(
            cls=self.lambda_cls,
            prior=self.lambda_prior if self.distill else 0.0,
            rel=self.lambda_rel if (self.distill and self.rel) else 0.0,
        )

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in fields(cls)}


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train_index: np.ndarray
    val_index: np.ndarray
    train_patient_ids: tuple[str, ...] = ()
    val_patient_ids: tuple[str, ...] = ()


@dataclass
class FitResult:
    params: StudentParams
    threshold: float
    train_loss_curve: list[float]
    eval: EvalReport | None = None


def stratified_kfold(labels: Sequence[int], n_folds: int, seed: int, ids: Sequence[str] | None = None) -> list[FoldSplit]:
    """Seeded per-class shuffle followed by a round-robin deal into folds.

    The deal continues across classes, so fold sizes differ by at most one.
    """
    labels = np.asarray(labels, dtype=int)
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    rng = np.random.default_rng(seed)
    assignment = np.empty(labels.size, dtype=int)
    offset = 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < n_folds:
            raise ValueError(f"class {c} has {members.size} members, fewer than {n_folds} folds")
        members = rng.permutation(members)
        assignment[members] = (offset + np.arange(members.size)) % n_folds
        offset += members.size
    splits = []
    for f in range(n_folds):
        val = np.flatnonzero(assignment == f)
        train = np.flatnonzero(assignment != f)
        splits.append(
            FoldSplit(
                fold_id=f,
                train_index=train,
                val_index=val,
                train_patient_ids=tuple(ids[i] for i in train) if ids is not None else (),
                val_patient_ids=tuple(ids[i] for i in val) if ids is not None else (),
            )
        )
    return splits


class _Adam:
    def __init__(self, params: StudentParams, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.t = 0

    def step(self, params: StudentParams, grads: StudentParams) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, g in grads.arrays().items():
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            setattr(params, name, getattr(params, name) - update)


class _SGD:
    def __init__(self, params: StudentParams, lr: float):
        self.lr = lr

    def step(self, params: StudentParams, grads: StudentParams) -> None:
        for name, g in grads.arrays().items():
            setattr(params, name, getattr(params, name) - self.lr * g)


def fit_fold(
    train: CohortTable,
    priors: PriorSet | None,
    fundus_graph: SymmetricGraph | None,
    cfg: TrainConfig,
) -> FitResult:
    """Train a student on one fold's training patients and pick its threshold.

    ``priors`` rows and ``fundus_graph`` nodes are aligned with the rows of
    ``train``.  Either may be None when the configuration does not use it.
    """
    weights = cfg.weights
    x, c, y = train.features, train.biomarkers, train.labels
    if x is None:
        raise TrainingError("training table has no feature matrix")
    n = len(train)
    if weights.prior > 0 or weights.rel > 0:
        if priors is None or len(priors) != n:
            raise TrainingError("priors must cover every training patient")
    if weights.rel > 0 and (fundus_graph is None or fundus_graph.n_nodes != n):
        raise TrainingError("relational graph must span the training patients")

    params = init_student(x.shape[1], cfg.embed_dim, c.shape[1], cfg.bio_dim, cfg.seed, hidden=cfg.hidden_dim)
    opt = _Adam(params, cfg.learning_rate) if cfg.optimizer == "adam" else _SGD(params, cfg.learning_rate)
    prior_rows = priors.priors if priors is not None else None

    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(cfg.seed + epoch).permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            trace = forward(params, x[batch], c[batch])
            l_cls, g_logit = cls_loss(trace.logit, y[batch])
            d_z = np.zeros_like(trace.embedding)
            l_prior = l_rel = 0.0
            if weights.prior > 0:
                l_prior, g_prior = prior_loss(trace.embedding, prior_rows[batch])
                d_z += weights.prior * g_prior
            if weights.rel > 0:
                edges = collect_batch_edges(batch, y, fundus_graph)
                l_rel, g_rel = rel_loss(trace.embedding, prior_rows[batch], edges)
                d_z += weights.rel * g_rel
            loss = weights.cls * l_cls + weights.prior * l_prior + weights.rel * l_rel
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}")
            grads = backward(params, trace, d_z, weights.cls * g_logit)
            opt.step(params, grads)
            epoch_losses.append(loss)
            step += 1
        curve.append(float(np.mean(epoch_losses)))

    scores = predict_proba(params, x, c)
    return FitResult(params=params, threshold=youden_threshold(scores, y), train_loss_curve=curve)


def evaluate_fit(result: FitResult, val: CohortTable) -> EvalReport:
    scores = predict_proba(result.params, val.features, val.biomarkers)
    return evaluate(scores, val.labels, result.threshold)


# -- per-fold pipeline -------------------------------------------------------


@dataclass
class FoldData:
    mri: CohortTable
    train: CohortTable
    val: CohortTable
    scaler: Scaler


def preprocess_fold(mri_raw: RawCohortFile, fundus_raw: RawCohortFile, split: FoldSplit, cfg: TrainConfig) -> FoldData:
    assert_disjoint(mri_raw, fundus_raw)
    train_raw = fundus_raw.take(split.train_index)
    val_raw = fundus_raw.take(split.val_index)
    scaler = fit_preprocessor(stack_raw(mri_raw, train_raw) if cfg.shared_scaler else train_raw)
    mri_scaler = scaler if cfg.shared_scaler else fit_preprocessor(mri_raw)
    return FoldData(
        mri=apply_preprocessor(mri_raw, mri_scaler),
        train=apply_preprocessor(train_raw, scaler),
        val=apply_preprocessor(val_raw, scaler),
        scaler=scaler,
    )


def teacher_graph(mri: CohortTable, cfg: TrainConfig) -> KnnGraph:
    return build_knn_graph(mri.biomarkers, cfg.k_mri, cfg.sigma)


def teacher_priors(mri: CohortTable, graph: KnnGraph | None, cfg: TrainConfig) -> np.ndarray:
    """Smoothed teacher embeddings, or the raw ones when smoothing is off."""
    if mri.embeddings is None:
        raise TrainingError("teacher cohort has no embeddings")
    if not cfg.smooth:
        return mri.embeddings.copy()
    return prior_mod.smooth_embeddings(mri.embeddings, graph, cfg.alpha)


def student_priors(mri: CohortTable, smoothed: np.ndarray, train: CohortTable, cfg: TrainConfig) -> PriorSet:
    mode = cfg.prior_mode
    if mode == "gated_knn":
        return prior_mod.impute_priors(
            train.biomarkers, mri.biomarkers, smoothed, train.labels, mri.labels,
            cfg.k_mri, cfg.sigma, fundus_ids=train.ids,
        )
    if mode == "ungated_knn":
        return prior_mod.ungated_knn_prior(
            train.biomarkers, mri.biomarkers, smoothed, cfg.k_mri, cfg.sigma, fundus_ids=train.ids
        )
    if mode == "global_mean":
        return prior_mod.broadcast_prior(prior_mod.global_mean_prior(smoothed), len(train))
    return prior_mod.class_prior(prior_mod.global_class_mean_prior(smoothed, mri.labels), train.labels)


def relation_graph(train: CohortTable, cfg: TrainConfig) -> SymmetricGraph:
    k = min(cfg.k_fundus, len(train) - 1)
    return symmetrize(build_knn_graph(train.biomarkers, k, cfg.sigma), use_normalized=cfg.rel_use_normalized)


@dataclass
class FoldOutcome:
    split: FoldSplit
    fit: FitResult
    fallback_rate: float | None = None


def run_fold(mri_raw: RawCohortFile, fundus_raw: RawCohortFile, split: FoldSplit, cfg: TrainConfig) -> FoldOutcome:
    data = preprocess_fold(mri_raw, fundus_raw, split, cfg)
    priors = graph = None
    weights = cfg.weights
    if weights.prior > 0 or weights.rel > 0:
        tgraph = teacher_graph(data.mri, cfg) if cfg.smooth else None
        smoothed = teacher_priors(data.mri, tgraph, cfg)
        priors = student_priors(data.mri, smoothed, data.train, cfg)
    if weights.rel > 0:
        graph = relation_graph(data.train, cfg)
    fit = fit_fold(data.train, priors, graph, cfg)
    fit.eval = evaluate_fit(fit, data.val)
    rate = priors.fallback_rate if priors is not None and cfg.prior_mode == "gated_knn" else None
    if rate is not None:
        log.info("fold %d: gated fallback rate %.3f", split.fold_id, rate)
    return FoldOutcome(split=split, fit=fit, fallback_rate=rate)


@dataclass
class CVResult:
    folds: list[FoldOutcome]
    aggregate: dict[str, tuple[float, float]] = field(default_factory=dict)

    def metric(self, name: str) -> np.ndarray:
        return np.array([getattr(f.fit.eval, name) for f in self.folds])


def aggregate_reports(reports: Sequence[EvalReport]) -> dict[str, tuple[float, float]]:
    """Mean and population standard deviation of each metric across folds."""
    out = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(r, name) for r in reports])
        out[name] = (float(values.mean()), float(values.std()))
    return out


def _run_fold_job(args):
    return run_fold(*args)


def run_cv(mri_raw: RawCohortFile, fundus_raw: RawCohortFile, cfg: TrainConfig, jobs: int = 1) -> CVResult:
    splits = stratified_kfold(fundus_raw.labels, cfg.n_folds, cfg.seed, ids=fundus_raw.ids)
    tasks = [(mri_raw, fundus_raw, s, cfg) for s in splits]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_fold_job, tasks))
    else:
        outcomes = [_run_fold_job(t) for t in tasks]
    return CVResult(folds=outcomes, aggregate=aggregate_reports([o.fit.eval for o in outcomes]))


# -- ablation grid -----------------------------------------------------------

SUPERVISED = ("Supervised", dict(distill=False, smooth=False, rel=False))
MODULE_ABLATION = (
    ("Distill", dict(distill=True, smooth=False, rel=False)),
    ("Distill+Smooth", dict(distill=True, smooth=True, rel=False)),
    ("Distill+Rel", dict(distill=True, smooth=False, rel=True)),
    ("Distill+Smooth+Rel", dict(distill=True, smooth=True, rel=True)),
)
PRIOR_ABLATION = (
    ("Global Mean", dict(prior_mode="global_mean")),
    ("Global Class Mean", dict(prior_mode="global_class_mean")),
    ("kNN (ungated)", dict(prior_mode="ungated_knn")),
    ("kNN (gated)", dict(prior_mode="gated_knn")),
)


def ablation_grid(cfg: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """Supervised baseline, the module switch grid, then the prior-mode sweep.

    The prior-mode rows keep the full distill/smooth/rel setting.
    """
    rows = [(SUPERVISED[0], replace(cfg, **SUPERVISED[1]))]
    rows += [(name, replace(cfg, **sw)) for name, sw in MODULE_ABLATION]
    full = dict(distill=True, smooth=True, rel=True)
    rows += [(name, replace(cfg, **full, **sw)) for name, sw in PRIOR_ABLATION]
    return rows


def run_ablation(
    mri_raw: RawCohortFile, fundus_raw: RawCohortFile, cfg: TrainConfig, jobs: int = 1
) -> list[tuple[str, CVResult]]:
    cache: dict[TrainConfig, CVResult] = {}
    out = []
    for name, row_cfg in ablation_grid(cfg):
        if row_cfg not in cache:
            log.info("ablation: running %s", name)
            cache[row_cfg] = run_cv(mri_raw, fundus_raw, row_cfg, jobs=jobs)
        out.append((name, cache[row_cfg]))
    return out


# -- report serialization ----------------------------------------------------


def format_fold_report(report: EvalReport) -> str:
    """``metric,value`` lines in a fixed order; floats use repr so they round-trip."""
    return "".join(f"{k},{v!r}\n" for k, v in report.as_dict().items())


def format_aggregate(aggregate: dict[str, tuple[float, float]]) -> str:
    lines = ["metric,mean,std\n"]
    lines += [f"{name},{mean!r},{std!r}\n" for name, (mean, std) in aggregate.items()]
    return "".join(lines)


def parse_aggregate(text: str) -> dict[str, tuple[float, float]]:
    out = {}
    for line in text.splitlines()[1:]:
        if line.strip():
            name, mean, std = line.split(",")
            out[name] = (float(mean), float(std))
    return out
