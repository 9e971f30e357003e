"""Student network: feature encoder -> unit embedding, biomarker MLP, logit head.

All functions work on batches: ``features`` is (B, f) and ``biomarkers``
is (B, m).  A single sample can be passed as a 1-D vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

# softplus keeps every layer C-infinity, which makes finite-difference
# checks well conditioned
ACTIVATION = "softplus"


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class StudentError(ValueError):
    pass


@dataclass
class StudentParams:
    enc_w1: np.ndarray  # (f, hidden)
    enc_b1: np.ndarray
    enc_w2: np.ndarray  # (hidden, d)
    enc_b2: np.ndarray
    bio_w: np.ndarray  # (m, h)
    bio_b: np.ndarray
    head_w: np.ndarray  # (d + h,)
    head_b: np.ndarray  # shape ()
    seed: int = 0

    @property
    def dims(self) -> dict[str, int]:
        return {
            "f": self.enc_w1.shape[0],
            "hidden": self.enc_w1.shape[1],
            "d": self.enc_w2.shape[1],
            "m": self.bio_w.shape[0],
            "h": self.bio_w.shape[1],
        }

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "seed"}

    def copy(self) -> "StudentParams":
        return StudentParams(**{k: v.copy() for k, v in self.arrays().items()}, seed=self.seed)


PARAM_NAMES = tuple(f.name for f in fields(StudentParams) if f.name != "seed")


def init_student(f: int, d: int, m: int, h: int, seed: int, hidden: int | None = None) -> StudentParams:
    """Uniform(+-1/sqrt(fan_in)) initialization, deterministic in ``seed``."""
    hidden = d if hidden is None else hidden
    if min(f, d, m, h, hidden) < 1:
        raise StudentError(f"all dimensions must be >= 1, got f={f} d={d} m={m} h={h} hidden={hidden}")
    rng = np.random.default_rng(seed)

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return StudentParams(
        enc_w1=uniform(f, (f, hidden)),
        enc_b1=uniform(f, (hidden,)),
        enc_w2=uniform(hidden, (hidden, d)),
        enc_b2=uniform(hidden, (d,)),
        bio_w=uniform(m, (m, h)),
        bio_b=uniform(m, (h,)),
        head_w=uniform(d + h, (d + h,)),
        head_b=np.asarray(uniform(d + h, ())),
        seed=seed,
    )


@dataclass
class ForwardTrace:
    features: np.ndarray
    biomarkers: np.ndarray
    enc_pre: np.ndarray
    enc_hidden: np.ndarray
    raw_embedding: np.ndarray
    norm: np.ndarray
    embedding: np.ndarray  # unit rows
    bio_pre: np.ndarray
    bio_embedding: np.ndarray
    logit: np.ndarray


def forward(p: StudentParams, features: np.ndarray, biomarkers: np.ndarray) -> ForwardTrace:
    x = np.atleast_2d(np.asarray(features, dtype=float))
    c = np.atleast_2d(np.asarray(biomarkers, dtype=float))
    dims = p.dims
    if x.shape[1] != dims["f"] or c.shape[1] != dims["m"] or x.shape[0] != c.shape[0]:
        raise StudentError(
            f"input shapes {x.shape} / {c.shape} do not match model f={dims['f']} m={dims['m']}"
        )
    a1 = x @ p.enc_w1 + p.enc_b1
    h1 = softplus(a1)
    e = h1 @ p.enc_w2 + p.enc_b2
    r = np.linalg.norm(e, axis=1)
    if (r == 0).any():
        raise StudentError("encoder output has zero norm; cannot normalize")
    z = e / r[:, None]
    ab = c @ p.bio_w + p.bio_b
    g = softplus(ab)
    logit = np.concatenate([z, g], axis=1) @ p.head_w + p.head_b
    return ForwardTrace(x, c, a1, h1, e, r, z, ab, g, logit)


def backward(p: StudentParams, trace: ForwardTrace, d_embedding: np.ndarray | None, d_logit: np.ndarray) -> StudentParams:
    """Parameter gradients given upstream gradients on the unit embedding and logit.

    The returned object has the parameter layout; its ``seed`` is unused.
    """
    d = p.dims["d"]
    z, g = trace.embedding, trace.bio_embedding
    d_logit = np.asarray(d_logit, dtype=float).reshape(-1)
    cat = np.concatenate([z, g], axis=1)
    g_head_w = cat.T @ d_logit
    g_head_b = np.asarray(d_logit.sum())
    d_cat = d_logit[:, None] * p.head_w[None, :]

    dz = d_cat[:, :d]
    if d_embedding is not None:
        dz = dz + d_embedding
    # Jacobian of e / |e| is (I - z z^T) / |e|
    de = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / trace.norm[:, None]
    g_enc_w2 = trace.enc_hidden.T @ de
    g_enc_b2 = de.sum(axis=0)
    da1 = (de @ p.enc_w2.T) * sigmoid(trace.enc_pre)
    g_enc_w1 = trace.features.T @ da1
    g_enc_b1 = da1.sum(axis=0)

    dab = d_cat[:, d:] * sigmoid(trace.bio_pre)
    g_bio_w = trace.biomarkers.T @ dab
    g_bio_b = dab.sum(axis=0)
    return StudentParams(
        enc_w1=g_enc_w1, enc_b1=g_enc_b1, enc_w2=g_enc_w2, enc_b2=g_enc_b2,
        bio_w=g_bio_w, bio_b=g_bio_b, head_w=g_head_w, head_b=g_head_b, seed=p.seed,
    )


def predict_proba(p: StudentParams, features: np.ndarray, biomarkers: np.ndarray) -> np.ndarray:
    return sigmoid(forward(p, features, biomarkers).logit)


def write_checkpoint(prefix: str | Path, p: StudentParams) -> None:
    """Write ``<prefix>.bin`` (one float32 matrix block per layer) and ``<prefix>_manifest.txt``.

    Each block is a (rows, cols) u32 header followed by float32 payload.
    Vectors are stored as 1 x n blocks and the head bias as 1 x 1.
    """
    prefix = Path(prefix)
    lines = [f"seed,{p.seed}"]
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        for name, arr in p.arrays().items():
            block = arr.reshape(arr.shape[0], -1) if arr.ndim == 2 else arr.reshape(1, -1)
            fh.write(struct.pack("<II", *block.shape))
            fh.write(block.astype("<f4").tobytes())
            lines.append(f"{name},{','.join(str(s) for s in arr.shape)}")
    (prefix.parent / f"{prefix.name}_manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_checkpoint(prefix: str | Path) -> StudentParams:
    prefix = Path(prefix)
    manifest = (prefix.parent / f"{prefix.name}_manifest.txt").read_text(encoding="utf-8").splitlines()
    seed = int(manifest[0].split(",")[1])
    data = prefix.with_suffix(".bin").read_bytes()
    offset = 0
    arrays = {}
    for line in manifest[1:]:
        name, *shape = line.split(",")
        shape = tuple(int(s) for s in shape if s)
        rows, cols = struct.unpack_from("<II", data, offset)
        offset += 8
        block = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=offset)
        offset += 4 * rows * cols
        arrays[name] = block.astype(float).reshape(shape)
    if set(arrays) != set(PARAM_NAMES):
        raise StudentError(f"checkpoint layers {sorted(arrays)} do not match the model")
    return StudentParams(**arrays, seed=seed)
