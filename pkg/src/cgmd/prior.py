"""Teacher-embedding smoothing and cross-cohort prior imputation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import KnnGraph, build_cross_knn
from .tabular import write_ids, write_matrix


class PriorError(ValueError):
    pass


@dataclass
class PriorSet:
    """Unit-norm imputed priors, one row per student-cohort patient.

    ``gated[u]`` is False when no retrieved neighbor shared the patient's
    label and the ungated neighborhood was used instead.  Global-mean style
    priors carry empty neighbor lists and ``gated`` False.
    """

    priors: np.ndarray
    gated: np.ndarray
    neighbor_ids: list[list[int]]

    def __len__(self) -> int:
        return self.priors.shape[0]

    @property
    def fallback_rate(self) -> float:
        return float(np.mean(~self.gated)) if len(self) else 0.0


def average_scan_embeddings(scan_embeddings: Sequence[np.ndarray]) -> np.ndarray:
    if len(scan_embeddings) == 0:
        raise PriorError("no scan embeddings to average")
    stacked = np.asarray(scan_embeddings, dtype=float)
    if stacked.ndim != 2:
        raise PriorError("scan embeddings must share one dimension")
    return stacked.mean(axis=0)


def smooth_embeddings(z0: np.ndarray, g: KnnGraph, alpha: float) -> np.ndarray:
    """One residual propagation step: ``alpha * z0 + (1 - alpha) * P @ z0``."""
    z0 = np.asarray(z0, dtype=float)
    if g.bipartite or g.n_nodes != z0.shape[0]:
        raise PriorError(f"graph over {g.n_nodes} nodes cannot smooth {z0.shape[0]} rows")
    if not 0.0 <= alpha <= 1.0:
        raise PriorError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return z0.copy()
    neighbor_mean = np.einsum("ik,ikd->id", g.weights, z0[g.indices])
    return alpha * z0 + (1.0 - alpha) * neighbor_mean


def _normalize_rows(v: np.ndarray, ids: Sequence[str] | None = None) -> np.ndarray:
    norms = np.linalg.norm(v, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        who = ids[bad[0]] if ids is not None else f"row {bad[0]}"
        raise PriorError(f"imputed prior for patient {who} has zero norm")
    return v / norms[:, None]


def impute_priors(
    fundus_bio: np.ndarray,
    mri_bio: np.ndarray,
    mri_smoothed: np.ndarray,
    fundus_labels: np.ndarray,
    mri_labels: np.ndarray,
    k: int,
    sigma: float,
    gate: bool = True,
    fundus_ids: Sequence[str] | None = None,
) -> PriorSet:
    """Label-gated weighted average of smoothed teacher embeddings.

    Each query retrieves its top-``k`` reference patients; with ``gate`` the
    set is restricted to references sharing the query label and the weights
    renormalized over it, falling back to the full neighborhood when the
    restriction is empty.  Rows are l2-normalized before being returned.
    """
    mri_smoothed = np.asarray(mri_smoothed, dtype=float)
    mri_labels = np.asarray(mri_labels)
    fundus_labels = np.asarray(fundus_labels)
    if mri_smoothed.shape[0] != np.asarray(mri_bio).shape[0] or mri_labels.shape[0] != mri_smoothed.shape[0]:
        raise PriorError("reference biomarkers, embeddings and labels disagree on row count")
    if fundus_labels.shape[0] != np.asarray(fundus_bio).shape[0]:
        raise PriorError("query biomarkers and labels disagree on row count")
    cross = build_cross_knn(fundus_bio, mri_bio, k, sigma)

    weights = cross.weights
    gated = np.zeros(cross.n_nodes, dtype=bool)
    if gate:
        same = mri_labels[cross.indices] == fundus_labels[:, None]
        gated = same.any(axis=1)
        mask = np.where(gated[:, None], same, True)
        weights = np.where(mask, weights, 0.0)
        weights = weights / weights.sum(axis=1, keepdims=True)
    else:
        mask = np.ones_like(weights, dtype=bool)

    raw = np.einsum("ik,ikd->id", weights, mri_smoothed[cross.indices])
    neighbor_ids = [[int(j) for j, m in zip(row, keep) if m] for row, keep in zip(cross.indices, mask)]
    return PriorSet(priors=_normalize_rows(raw, fundus_ids), gated=gated, neighbor_ids=neighbor_ids)


def ungated_knn_prior(
    fundus_bio: np.ndarray,
    mri_bio: np.ndarray,
    mri_smoothed: np.ndarray,
    k: int,
    sigma: float,
    fundus_ids: Sequence[str] | None = None,
) -> PriorSet:
    q = np.asarray(fundus_bio).shape[0]
    n = np.asarray(mri_bio).shape[0]
    return impute_priors(
        fundus_bio, mri_bio, mri_smoothed, np.zeros(q, int), np.zeros(n, int), k, sigma,
        gate=False, fundus_ids=fundus_ids,
    )


def global_mean_prior(mri_smoothed: np.ndarray) -> np.ndarray:
    mri_smoothed = np.asarray(mri_smoothed, dtype=float)
    if mri_smoothed.shape[0] == 0:
        raise PriorError("empty reference cohort")
    return _normalize_rows(mri_smoothed.mean(axis=0, keepdims=True))[0]


def global_class_mean_prior(mri_smoothed: np.ndarray, mri_labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalized class-0 and class-1 mean embeddings."""
    mri_smoothed = np.asarray(mri_smoothed, dtype=float)
    mri_labels = np.asarray(mri_labels)
    means = []
    for c in (0, 1):
        rows = mri_smoothed[mri_labels == c]
        if rows.shape[0] == 0:
            raise PriorError(f"class {c} absent from reference cohort")
        means.append(rows.mean(axis=0))
    out = _normalize_rows(np.vstack(means))
    return out[0], out[1]


def broadcast_prior(vector: np.ndarray, n: int) -> PriorSet:
    return PriorSet(
        priors=np.tile(vector, (n, 1)),
        gated=np.zeros(n, dtype=bool),
        neighbor_ids=[[] for _ in range(n)],
    )


def class_prior(class_means: tuple[np.ndarray, np.ndarray], labels: np.ndarray) -> PriorSet:
    stacked = np.vstack(class_means)
    labels = np.asarray(labels, dtype=int)
    return PriorSet(
        priors=stacked[labels],
        gated=np.zeros(labels.shape[0], dtype=bool),
        neighbor_ids=[[] for _ in labels],
    )


def write_priors(out_prefix: str | Path, priors: PriorSet, ids: Sequence[str], ref_ids: Sequence[str]) -> None:
    """Write ``<prefix>.bin`` / ``<prefix>.ids`` and a ``<prefix>_manifest.csv``.

    Manifest rows read ``patient_id,gated,neighbor_ids...`` where neighbor
    ids are reference-cohort patient ids.
    """
    out_prefix = Path(out_prefix)
    write_matrix(out_prefix.with_suffix(".bin"), priors.priors)
    write_ids(out_prefix.with_suffix(".ids"), ids)
    manifest = out_prefix.parent / f"{out_prefix.name}_manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for pid, gated, nbrs in zip(ids, priors.gated, priors.neighbor_ids):
            writer.writerow([pid, int(gated), *(ref_ids[j] for j in nbrs)])
