"""Classification, prior-distillation and relational-distillation losses.

Each loss returns ``(value, gradient)`` where the gradient is taken with
respect to its first argument (logits or embeddings).  Priors are fixed
targets and receive no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import SymmetricGraph
from .student import sigmoid

UNIT_TOL = 1e-6
REL_NORMALIZER_FLOOR = 1e-12


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    prior: float = 1.0
    rel: float = 1.0

    def __post_init__(self):
        if min(self.cls, self.prior, self.rel) < 0:
            raise LossError(f"loss weights must be nonnegative: {self}")


@dataclass(frozen=True)
class BatchRelEdges:
    """Same-label graph edges inside a minibatch, as batch positions."""

    u: np.ndarray
    v: np.ndarray
    weight: np.ndarray

    def __len__(self) -> int:
        return self.u.shape[0]

    @classmethod
    def empty(cls) -> "BatchRelEdges":
        return cls(np.zeros(0, int), np.zeros(0, int), np.zeros(0))


def cls_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy computed from raw logits."""
    logits = np.asarray(logits, dtype=float).reshape(-1)
    labels = np.asarray(labels, dtype=float).reshape(-1)
    if logits.size == 0:
        raise LossError("empty batch")
    if logits.shape != labels.shape:
        raise LossError(f"{logits.shape[0]} logits for {labels.shape[0]} labels")
    n = logits.size
    # softplus(l) - y*l, written to avoid exp overflow
    per = np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    return float(per.mean()), (sigmoid(logits) - labels) / n


def prior_loss(z: np.ndarray, priors: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cosine distance between unit embeddings and their unit priors."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    priors = np.atleast_2d(np.asarray(priors, dtype=float))
    if z.shape != priors.shape:
        raise LossError(f"embedding shape {z.shape} != prior shape {priors.shape}")
    for name, arr in (("embedding", z), ("prior", priors)):
        dev = np.abs(np.linalg.norm(arr, axis=1) - 1.0)
        if dev.size and dev.max() > UNIT_TOL:
            raise LossError(f"{name} rows must be unit norm (max deviation {dev.max():.2e})")
    n = z.shape[0]
    loss = float(np.mean(1.0 - np.sum(z * priors, axis=1)))
    return loss, -priors / n


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


def rel_loss(z: np.ndarray, priors: np.ndarray, edges: BatchRelEdges) -> tuple[float, np.ndarray]:
    """Edge-weighted squared gap between student and prior cosine similarities.

    The weighted sum is divided by the total edge weight (floored at
    ``REL_NORMALIZER_FLOOR``); with no edges the loss and gradient are zero.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    grad = np.zeros_like(z)
    if len(edges) == 0:
        return 0.0, grad
    u, v, w = edges.u, edges.v, edges.weight
    if max(u.max(), v.max()) >= z.shape[0] or min(u.min(), v.min()) < 0:
        raise LossError("edge index outside batch")
    zu, zv = z[u], z[v]
    nu = np.linalg.norm(zu, axis=1)
    nv = np.linalg.norm(zv, axis=1)
    s = np.sum(zu * zv, axis=1) / (nu * nv)
    t = _cosine(priors[u], priors[v])
    total = max(float(w.sum()), REL_NORMALIZER_FLOOR)
    resid = s - t
    loss = float(np.sum(w * resid**2) / total)

    coef = (2.0 * w * resid / total)[:, None]
    # d cos(a, b) / da = b / (|a||b|) - cos * a / |a|^2
    gu = coef * (zv / (nu * nv)[:, None] - s[:, None] * zu / (nu**2)[:, None])
    gv = coef * (zu / (nu * nv)[:, None] - s[:, None] * zv / (nv**2)[:, None])
    np.add.at(grad, u, gu)
    np.add.at(grad, v, gv)
    return loss, grad


def total_loss(parts: tuple[float, float, float], weights: LossWeights) -> float:
    l_cls, l_prior, l_rel = parts
    if not all(np.isfinite(parts)):
        raise LossError(f"non-finite loss component in {parts}")
    return weights.cls * l_cls + weights.prior * l_prior + weights.rel * l_rel


def collect_batch_edges(batch_indices: np.ndarray, labels: np.ndarray, fundus_graph: SymmetricGraph) -> BatchRelEdges:
    """Graph edges with both endpoints in the batch and equal labels.

    ``batch_indices`` are node ids of ``fundus_graph``; the returned edges
    refer to positions within the batch.
    """
    batch_indices = np.asarray(batch_indices, dtype=int)
    labels = np.asarray(labels)
    if batch_indices.size and (batch_indices.min() < 0 or batch_indices.max() >= fundus_graph.n_nodes):
        raise LossError("batch index outside graph")
    pos = np.full(fundus_graph.n_nodes, -1)
    pos[batch_indices] = np.arange(batch_indices.size)
    gu, gv, gw = fundus_graph.arrays()
    if gu.size == 0:
        return BatchRelEdges.empty()
    keep = (pos[gu] >= 0) & (pos[gv] >= 0) & (labels[gu] == labels[gv])
    return BatchRelEdges(pos[gu[keep]], pos[gv[keep]], gw[keep])
