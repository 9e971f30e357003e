"""Cohort file loading, biomarker preprocessing and sidecar matrices.

A cohort file is UTF-8 comma-separated text with a header row.  A schema
maps column names to one of the roles ``id``, ``label``, ``numeric``,
``categorical``, ``embedding`` or ``feature``.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

ROLES = ("id", "label", "numeric", "categorical", "embedding", "feature")
MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none"})
STD_FLOOR = 1e-6


class CohortError(ValueError):
    """Base class for cohort ingestion failures."""


class ParseError(CohortError):
    pass


class SchemaError(CohortError):
    pass


class ValidationError(CohortError):
    pass


@dataclass(frozen=True)
class Schema:
    id: str
    label: str
    numeric: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()
    embedding: tuple[str, ...] = ()
    feature: tuple[str, ...] = ()

    @classmethod
    def from_roles(cls, pairs: Sequence[tuple[str, str]]) -> "Schema":
        by_role: dict[str, list[str]] = {r: [] for r in ROLES}
        for column, role in pairs:
            if role not in by_role:
                raise SchemaError(f"unknown role {role!r} for column {column!r}")
            by_role[role].append(column)
        for role in ("id", "label"):
            if len(by_role[role]) != 1:
                raise SchemaError(f"schema needs exactly one {role} column, got {by_role[role]}")
        return cls(
            id=by_role["id"][0],
            label=by_role["label"][0],
            numeric=tuple(by_role["numeric"]),
            categorical=tuple(by_role["categorical"]),
            embedding=tuple(by_role["embedding"]),
            feature=tuple(by_role["feature"]),
        )

    def columns(self) -> list[str]:
        return [self.id, self.label, *self.numeric, *self.categorical, *self.embedding, *self.feature]

    def to_rows(self) -> list[tuple[str, str]]:
        rows = [(self.id, "id"), (self.label, "label")]
        for role in ROLES[2:]:
            rows.extend((c, role) for c in getattr(self, role))
        return rows


def load_schema(path: str | Path) -> Schema:
    """Read a ``column,role`` schema file (header row optional)."""
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise SchemaError(f"{path}:{lineno}: expected 'column,role'")
            column, role = row[0].strip(), row[1].strip()
            if lineno == 1 and (column, role) == ("column", "role"):
                continue
            pairs.append((column, role))
    return Schema.from_roles(pairs)


def write_schema(path: str | Path, schema: Schema) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["column", "role"])
        writer.writerows(schema.to_rows())


@dataclass
class RawCohortFile:
    """Typed rows of one cohort file.  Missing numeric cells are NaN."""

    ids: list[str]
    labels: np.ndarray
    numeric: np.ndarray
    categorical: list[list[str]]
    numeric_names: tuple[str, ...] = ()
    categorical_names: tuple[str, ...] = ()
    embeddings: np.ndarray | None = None
    features: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, index: Sequence[int] | np.ndarray) -> "RawCohortFile":
        index = np.asarray(index, dtype=int)
        return RawCohortFile(
            ids=[self.ids[i] for i in index],
            labels=self.labels[index],
            numeric=self.numeric[index],
            categorical=[self.categorical[i] for i in index],
            numeric_names=self.numeric_names,
            categorical_names=self.categorical_names,
            embeddings=None if self.embeddings is None else self.embeddings[index],
            features=None if self.features is None else self.features[index],
        )


def _parse_float(cell: str, allow_missing: bool) -> float:
    token = cell.strip()
    if token.lower() in MISSING_TOKENS:
        if allow_missing:
            return math.nan
        raise ValueError(f"missing value {cell!r}")
    value = float(token)
    if not math.isfinite(value):
        if allow_missing and math.isnan(value):
            return math.nan
        raise ValueError(f"non-finite value {cell!r}")
    return value


def load_cohort(path: str | Path, schema: Schema | str | Path) -> RawCohortFile:
    """Load a cohort CSV according to ``schema``.

    Raises ``SchemaError`` when the schema names a column absent from the
    header, ``ParseError`` (with the line number) on a malformed row and
    ``ValidationError`` on duplicate patient ids or labels outside {0, 1}.
    """
    if not isinstance(schema, Schema):
        schema = load_schema(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        col = {name: i for i, name in enumerate(header)}
        missing = [c for c in schema.columns() if c not in col]
        if missing:
            raise SchemaError(f"{path}: schema columns not in header: {missing}")

        ids: list[str] = []
        labels: list[int] = []
        numeric: list[list[float]] = []
        categorical: list[list[str]] = []
        embeddings: list[list[float]] = []
        features: list[list[float]] = []
        seen: dict[str, int] = {}
        for row in reader:
            lineno = reader.line_num
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            pid = row[col[schema.id]].strip()
            if not pid:
                raise ParseError(f"{path}:{lineno}: empty patient id")
            if pid in seen:
                raise ValidationError(
                    f"{path}:{lineno}: duplicate patient_id {pid!r} (first seen line {seen[pid]})"
                )
            seen[pid] = lineno
            try:
                label = int(float(row[col[schema.label]]))
                if label not in (0, 1) or float(row[col[schema.label]]) != label:
                    raise ValidationError(f"{path}:{lineno}: label must be 0 or 1")
                numeric.append([_parse_float(row[col[c]], True) for c in schema.numeric])
                embeddings.append([_parse_float(row[col[c]], False) for c in schema.embedding])
                features.append([_parse_float(row[col[c]], False) for c in schema.feature])
            except ValidationError:
                raise
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            categorical.append([row[col[c]].strip() for c in schema.categorical])
            ids.append(pid)
            labels.append(label)

    n = len(ids)
    return RawCohortFile(
        ids=ids,
        labels=np.asarray(labels, dtype=np.int64),
        numeric=np.asarray(numeric, dtype=float).reshape(n, len(schema.numeric)),
        categorical=categorical,
        numeric_names=schema.numeric,
        categorical_names=schema.categorical,
        embeddings=np.asarray(embeddings, dtype=float).reshape(n, -1) if schema.embedding else None,
        features=np.asarray(features, dtype=float).reshape(n, -1) if schema.feature else None,
    )


def write_cohort(path: str | Path, raw: RawCohortFile, schema: Schema) -> None:
    """Write ``raw`` back out under ``schema``; floats use ``repr`` so they round-trip."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(schema.columns())
        for i, pid in enumerate(raw.ids):
            row = [pid, str(int(raw.labels[i]))]
            row += ["" if math.isnan(v) else repr(float(v)) for v in raw.numeric[i]]
            row += list(raw.categorical[i])
            if schema.embedding:
                row += [repr(float(v)) for v in raw.embeddings[i]]
            if schema.feature:
                row += [repr(float(v)) for v in raw.features[i]]
            writer.writerow(row)


def stack_raw(*raws: RawCohortFile) -> RawCohortFile:
    """Concatenate the biomarker part of several cohorts (ids, labels, numeric, categorical)."""
    first = raws[0]
    for r in raws[1:]:
        if r.numeric_names != first.numeric_names or r.categorical_names != first.categorical_names:
            raise ValidationError("cohorts disagree on biomarker columns")
    return RawCohortFile(
        ids=[i for r in raws for i in r.ids],
        labels=np.concatenate([r.labels for r in raws]),
        numeric=np.vstack([r.numeric for r in raws]),
        categorical=[row for r in raws for row in r.categorical],
        numeric_names=first.numeric_names,
        categorical_names=first.categorical_names,
    )


@dataclass(frozen=True)
class Scaler:
    numeric_names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    categorical_names: tuple[str, ...]
    vocab: tuple[tuple[str, ...], ...]

    @property
    def width(self) -> int:
        return len(self.mean) + sum(len(v) for v in self.vocab)


@dataclass
class CohortTable:
    ids: list[str]
    labels: np.ndarray
    biomarkers: np.ndarray
    scaler: Scaler
    embeddings: np.ndarray | None = None
    features: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)


def fit_preprocessor(raw: RawCohortFile) -> Scaler:
    """Per-column mean / population std over observed values plus category vocabularies."""
    if len(raw) < 2:
        raise ValidationError("need at least 2 rows to fit a preprocessor")
    means, stds = [], []
    for j, name in enumerate(raw.numeric_names):
        column = raw.numeric[:, j]
        observed = column[~np.isnan(column)]
        if observed.size == 0:
            raise ValidationError(f"numeric column {name!r} has no observed values")
        mu = observed.mean()
        means.append(mu)
        stds.append(max(float(np.sqrt(np.mean((observed - mu) ** 2))), STD_FLOOR))
    vocab = []
    for j in range(len(raw.categorical_names)):
        # dict preserves first-appearance order
        vocab.append(tuple(dict.fromkeys(row[j] for row in raw.categorical)))
    return Scaler(
        numeric_names=tuple(raw.numeric_names),
        mean=np.asarray(means, dtype=float),
        std=np.asarray(stds, dtype=float),
        categorical_names=tuple(raw.categorical_names),
        vocab=tuple(vocab),
    )


def apply_preprocessor(raw: RawCohortFile, scaler: Scaler) -> CohortTable:
    """Standardize numerics (missing -> 0) and one-hot encode categoricals.

    Categories absent from the scaler vocabulary encode as an all-zero block.
    """
    if raw.numeric.shape[1] != len(scaler.mean) or len(raw.categorical_names) != len(scaler.vocab):
        raise ValidationError(
            f"arity mismatch: cohort has {raw.numeric.shape[1]} numeric / "
            f"{len(raw.categorical_names)} categorical columns, scaler expects "
            f"{len(scaler.mean)} / {len(scaler.vocab)}"
        )
    n = len(raw)
    numeric = np.where(np.isnan(raw.numeric), scaler.mean, raw.numeric)
    numeric = (numeric - scaler.mean) / scaler.std
    blocks = [numeric.reshape(n, -1)]
    for j, vocab in enumerate(scaler.vocab):
        lookup = {cat: k for k, cat in enumerate(vocab)}
        block = np.zeros((n, len(vocab)))
        for i, row in enumerate(raw.categorical):
            k = lookup.get(row[j])
            if k is not None:
                block[i, k] = 1.0
        blocks.append(block)
    return CohortTable(
        ids=list(raw.ids),
        labels=raw.labels.copy(),
        biomarkers=np.hstack(blocks),
        scaler=scaler,
        embeddings=None if raw.embeddings is None else raw.embeddings.copy(),
        features=None if raw.features is None else raw.features.copy(),
    )


def assert_disjoint(a: CohortTable | RawCohortFile, b: CohortTable | RawCohortFile) -> None:
    shared = sorted(set(a.ids) & set(b.ids))
    if shared:
        raise ValidationError(f"cohorts share {len(shared)} patient id(s): {', '.join(shared)}")


# -- sidecar matrices --------------------------------------------------------

_HEADER = struct.Struct("<II")


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    """Write a little-endian float32 matrix preceded by a (rows, cols) u32 header."""
    matrix = np.atleast_2d(np.asarray(matrix))
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*matrix.shape))
        fh.write(matrix.astype("<f4").tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ParseError(f"{path}: truncated matrix header")
    rows, cols = _HEADER.unpack_from(data)
    body = data[_HEADER.size:]
    if len(body) != 4 * rows * cols:
        raise ParseError(f"{path}: expected {rows}x{cols} float32 payload, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(float)


def write_ids(path: str | Path, ids: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


def read_ids(path: str | Path) -> list[str]:
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def attach_sidecar(
    raw: RawCohortFile, matrix_path: str | Path, ids_path: str | Path, role: str = "embedding"
) -> RawCohortFile:
    """Return a copy of ``raw`` with sidecar rows aligned to its patient order."""
    matrix = read_matrix(matrix_path)
    ids = read_ids(ids_path)
    if len(ids) != matrix.shape[0]:
        raise ValidationError(f"{ids_path}: {len(ids)} ids for {matrix.shape[0]} matrix rows")
    row_of = {pid: r for r, pid in enumerate(ids)}
    absent = [pid for pid in raw.ids if pid not in row_of]
    if absent:
        raise ValidationError(f"sidecar lacks rows for: {', '.join(absent[:10])}")
    aligned = matrix[[row_of[pid] for pid in raw.ids]]
    out = raw.take(np.arange(len(raw)))
    if role == "embedding":
        out.embeddings = aligned
    elif role == "feature":
        out.features = aligned
    else:
        raise SchemaError(f"sidecar role must be embedding or feature, got {role!r}")
    return out
