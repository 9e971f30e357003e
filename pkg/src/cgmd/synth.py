"""Synthetic disjoint cohorts sharing a latent vascular factor.

Every patient draws a latent ``t ~ N(0, I)``.  The label follows a
logistic link on ``w . t``; biomarkers are ``A t`` plus noise with ``A``
shared by both cohorts, so biomarker neighbors are latent neighbors.  The
teacher cohort carries a near-noiseless embedding of ``t`` while the
student cohort carries weak, noisy features of it.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .metrics import auc
from .student import sigmoid
from .tabular import RawCohortFile, Schema, write_cohort, write_schema

CATEGORY_LEVELS = (("F", "M"), ("low", "mid", "high"))


@dataclass(frozen=True)
class SynthConfig:
    n_mri: int = 295
    n_fundus: int = 112
    latent_dim: int = 8
    biomarker_dim: int = 16
    n_categorical: int = 2
    teacher_dim: int = 64
    feature_dim: int = 256
    biomarker_noise: float = 0.1
    feature_noise: float = 1.0
    teacher_noise: float = 0.1
    teacher_label_gain: float = 8.0
    fundus_signal_strength: float = 0.6
    label_sharpness: float = 2.0
    prevalence: float = 0.5
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_mri, self.n_fundus, self.latent_dim, self.teacher_dim, self.feature_dim)
        if min(counts) < 1:
            raise ValueError(f"counts and dimensions must be positive: {self}")
        if not 0 <= self.n_categorical <= len(CATEGORY_LEVELS):
            raise ValueError(f"n_categorical must be in [0, {len(CATEGORY_LEVELS)}]")
        if self.biomarker_dim - self.n_categorical < 1:
            raise ValueError("need at least one numeric biomarker")
        if min(self.biomarker_noise, self.feature_noise, self.teacher_noise, self.teacher_label_gain) < 0:
            raise ValueError("noise levels must be nonnegative")
        if not 0 <= self.fundus_signal_strength <= 1:
            raise ValueError("fundus_signal_strength must lie in [0, 1]")
        if not 0 < self.prevalence < 1:
            raise ValueError("prevalence must lie in (0, 1)")

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in fields(cls)}


@dataclass
class GroundTruth:
    """Latent factors and generating maps; diagnostics only."""

    mri_latent: np.ndarray
    fundus_latent: np.ndarray
    label_direction: np.ndarray
    intercept: float
    sharpness: float

    def risk(self, latent: np.ndarray) -> np.ndarray:
        return sigmoid(self.sharpness * latent @ self.label_direction + self.intercept)


@dataclass
class SynthCohorts:
    mri: RawCohortFile
    fundus: RawCohortFile
    truth: GroundTruth


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((max(rows, cols), cols)))
    q = q * np.sign(np.diag(r))
    return q[:rows]


def generate(cfg: SynthConfig) -> SynthCohorts:
    rng = np.random.default_rng(cfg.seed)
    L = cfg.latent_dim
    n_numeric = cfg.biomarker_dim - cfg.n_categorical

    direction = rng.standard_normal(L)
    direction /= np.linalg.norm(direction)
    intercept = float(np.log(cfg.prevalence / (1 - cfg.prevalence)))
    bio_map = _orthonormal_columns(rng, n_numeric, L) * np.sqrt(n_numeric / min(n_numeric, L))
    cat_map = rng.standard_normal((cfg.n_categorical, L)) / np.sqrt(L)
    teacher_map = rng.standard_normal((cfg.teacher_dim, L)) / np.sqrt(L)
    feature_map = rng.standard_normal((cfg.feature_dim, L)) / np.sqrt(L)

    truth = GroundTruth(
        mri_latent=rng.standard_normal((cfg.n_mri, L)),
        fundus_latent=rng.standard_normal((cfg.n_fundus, L)),
        label_direction=direction,
        intercept=intercept,
        sharpness=cfg.label_sharpness,
    )

    numeric_names = tuple(f"bio_{j:02d}" for j in range(n_numeric))
    categorical_names = tuple(f"cat_{j}" for j in range(cfg.n_categorical))

    def cohort(prefix: str, latent: np.ndarray) -> RawCohortFile:
        n = latent.shape[0]
        labels = (rng.random(n) < truth.risk(latent)).astype(np.int64)
        numeric = latent @ bio_map.T + cfg.biomarker_noise * rng.standard_normal((n, n_numeric))
        cat_signal = latent @ cat_map.T + cfg.biomarker_noise * rng.standard_normal((n, cfg.n_categorical))
        categorical = []
        for row in cat_signal:
            cats = []
            for j, value in enumerate(row):
                levels = CATEGORY_LEVELS[j]
                edges = np.linspace(-1.0, 1.0, len(levels) + 1)[1:-1] if len(levels) > 2 else [0.0]
                cats.append(levels[int(np.searchsorted(edges, value))])
            categorical.append(cats)
        return RawCohortFile(
            ids=[f"{prefix}{i:04d}" for i in range(n)],
            labels=labels,
            numeric=numeric,
            categorical=categorical,
            numeric_names=numeric_names,
            categorical_names=categorical_names,
        )

    mri = cohort("M", truth.mri_latent)
    # a label-trained teacher over-represents the risk direction
    stretched = truth.mri_latent + (cfg.teacher_label_gain - 1.0) * np.outer(truth.mri_latent @ direction, direction)
    mri.embeddings = stretched @ teacher_map.T + cfg.teacher_noise * rng.standard_normal(
        (cfg.n_mri, cfg.teacher_dim)
    )
    fundus = cohort("F", truth.fundus_latent)
    fundus.features = cfg.fundus_signal_strength * truth.fundus_latent @ feature_map.T + (
        cfg.feature_noise * rng.standard_normal((cfg.n_fundus, cfg.feature_dim))
    )
    return SynthCohorts(mri=mri, fundus=fundus, truth=truth)


def oracle_auc(cohorts: SynthCohorts, which: str = "fundus") -> float:
    """AUC of the true risk score: the ceiling any predictor can reach."""
    raw = getattr(cohorts, which)
    latent = cohorts.truth.fundus_latent if which == "fundus" else cohorts.truth.mri_latent
    return auc(cohorts.truth.risk(latent), raw.labels)


def schemas(cohorts: SynthCohorts) -> tuple[Schema, Schema]:
    mri, fundus = cohorts.mri, cohorts.fundus
    mri_schema = Schema(
        id="patient_id",
        label="label",
        numeric=mri.numeric_names,
        categorical=mri.categorical_names,
        embedding=tuple(f"emb_{j:03d}" for j in range(mri.embeddings.shape[1])),
    )
    fundus_schema = Schema(
        id="patient_id",
        label="label",
        numeric=fundus.numeric_names,
        categorical=fundus.categorical_names,
        feature=tuple(f"feat_{j:03d}" for j in range(fundus.features.shape[1])),
    )
    return mri_schema, fundus_schema


def write_cohorts(out_dir: str | Path, cohorts: SynthCohorts) -> dict[str, Path]:
    """Write ``mri.csv``/``fundus.csv`` plus their ``*_schema.csv`` files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mri_schema, fundus_schema = schemas(cohorts)
    paths = {
        "mri": out_dir / "mri.csv",
        "mri_schema": out_dir / "mri_schema.csv",
        "fundus": out_dir / "fundus.csv",
        "fundus_schema": out_dir / "fundus_schema.csv",
    }
    write_cohort(paths["mri"], cohorts.mri, mri_schema)
    write_schema(paths["mri_schema"], mri_schema)
    write_cohort(paths["fundus"], cohorts.fundus, fundus_schema)
    write_schema(paths["fundus_schema"], fundus_schema)
    return paths
