"""Longitudinal data model, marginal covariances and train/test splitting.

A dataset is a list of per-individual blocks ``(times, X, Z, y)``. Blocks are
immutable once built; the stacked arrays used by the learners are computed
lazily and cached.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence, TextIO

import numpy as np
from scipy import linalg

from .kernels import KernelSpec, kernel_matrix


class DatasetError(ValueError):
    """Raised when input data violate the longitudinal data model."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a marginal covariance cannot be Cholesky-factorized."""


def _frozen(a, dtype=float, ndim=1):
    a = np.array(a, dtype=dtype)
    if a.ndim != ndim:
        raise DatasetError(f"expected a {ndim}-d array, got shape {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class IndividualBlock:
    id: str
    times: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen(self.times))
        object.__setattr__(self, "X", _frozen(self.X, ndim=2))
        object.__setattr__(self, "Z", _frozen(self.Z, ndim=2))
        object.__setattr__(self, "y", _frozen(self.y))
        n = self.times.shape[0]
        if n < 1:
            raise DatasetError(f"individual {self.id!r} has no observations")
        if self.X.shape[0] != n or self.Z.shape[0] != n or self.y.shape[0] != n:
            raise DatasetError(f"individual {self.id!r}: times, X, Z and y lengths differ")
        if n > 1 and not np.all(np.diff(self.times) > 0):
            raise DatasetError(f"individual {self.id!r}: times must be strictly increasing")

    @property
    def n_obs(self) -> int:
        return self.times.shape[0]


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    individuals: tuple[IndividualBlock, ...]

    def __post_init__(self):
        blocks = tuple(self.individuals)
        object.__setattr__(self, "individuals", blocks)
        if not blocks:
            raise DatasetError("dataset has no individuals")
        p, q = blocks[0].X.shape[1], blocks[0].Z.shape[1]
        seen = set()
        for b in blocks:
            if b.X.shape[1] != p or b.Z.shape[1] != q:
                raise DatasetError("all individuals must share p and q")
            if b.id in seen:
                raise DatasetError(f"duplicate individual id {b.id!r}")
            seen.add(b.id)

    @property
    def n(self) -> int:
        return len(self.individuals)

    @property
    def p(self) -> int:
        return self.individuals[0].X.shape[1]

    @property
    def q(self) -> int:
        return self.individuals[0].Z.shape[1]

    @cached_property
    def offsets(self) -> np.ndarray:
        """Row offsets of each block in the stacked arrays (length n + 1)."""
        return np.concatenate([[0], np.cumsum([b.n_obs for b in self.individuals])]).astype(np.int64)

    @property
    def N(self) -> int:
        return int(self.offsets[-1])

    @cached_property
    def X(self) -> np.ndarray:
        return np.ascontiguousarray(np.vstack([b.X for b in self.individuals]))

    @cached_property
    def Z(self) -> np.ndarray:
        return np.vstack([b.Z for b in self.individuals])

    @cached_property
    def y(self) -> np.ndarray:
        return np.concatenate([b.y for b in self.individuals])

    @cached_property
    def times(self) -> np.ndarray:
        return np.concatenate([b.times for b in self.individuals])

    @cached_property
    def groups(self) -> np.ndarray:
        """Block index of every stacked row."""
        return np.repeat(np.arange(self.n), np.diff(self.offsets))

    @cached_property
    def ids(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.individuals)

    def blocks_of(self, stacked: np.ndarray) -> list[np.ndarray]:
        """Split a stacked length-N vector back into per-individual pieces."""
        o = self.offsets
        return [stacked[o[i]:o[i + 1]] for i in range(self.n)]


@dataclass(frozen=True)
class VarianceComponents:
    B: np.ndarray
    gamma2: float
    sigma2: float

    def __post_init__(self):
        B = np.atleast_2d(np.array(self.B, dtype=float))
        if B.shape[0] != B.shape[1]:
            raise ValueError("B must be square")
        if not np.allclose(B, B.T, atol=1e-12):
            raise ValueError("B must be symmetric")
        if B.size and np.linalg.eigvalsh(B).min() < -1e-8:
            raise ValueError("B must be positive semidefinite")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if not self.gamma2 >= 0:
            raise ValueError("gamma2 must be nonnegative")
        B.setflags(write=False)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "gamma2", float(self.gamma2))
        object.__setattr__(self, "sigma2", float(self.sigma2))

    def to_dict(self) -> dict:
        return {"B": self.B.tolist(), "gamma2": self.gamma2, "sigma2": self.sigma2}

    @classmethod
    def from_dict(cls, d: dict) -> "VarianceComponents":
        return cls(np.array(d["B"], dtype=float), d["gamma2"], d["sigma2"])


@dataclass(eq=False)
class MarginalCovariance:
    """V_i together with its Cholesky factor, for repeated solves."""

    matrix: np.ndarray
    K: np.ndarray
    _factor: tuple = field(repr=False)

    def solve(self, rhs):
        return linalg.cho_solve(self._factor, rhs)

    @cached_property
    def inverse(self) -> np.ndarray:
        # scatter-accumulation in the GLS refit needs the entries of V^-1
        return self.solve(np.eye(self.matrix.shape[0]))

    @cached_property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._factor[0]))))


def marginal_covariance(block: IndividualBlock, vc: VarianceComponents,
                        kernel: KernelSpec) -> MarginalCovariance:
    """V_i = Z B Z^T + gamma2 K_i + sigma2 I, factorized once."""
    K = kernel_matrix(kernel, block.times)
    V = block.Z @ vc.B @ block.Z.T + vc.gamma2 * K
    V[np.diag_indices_from(V)] += vc.sigma2
    V = 0.5 * (V + V.T)
    try:
        factor = linalg.cho_factor(V, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            f"marginal covariance of individual {block.id!r} is not positive definite") from exc
    if not np.all(np.isfinite(factor[0])):
        raise NotPositiveDefiniteError(f"non-finite covariance for individual {block.id!r}")
    return MarginalCovariance(V, K, factor)


def marginal_covariances(dataset: LongitudinalDataset, vc: VarianceComponents,
                         kernel: KernelSpec) -> list[MarginalCovariance]:
    return [marginal_covariance(b, vc, kernel) for b in dataset.individuals]


def subset_rows(dataset: LongitudinalDataset, rows: Sequence[np.ndarray]) -> LongitudinalDataset:
    """New dataset keeping, for block i, the (sorted) local row indices rows[i]."""
    blocks = []
    for b, r in zip(dataset.individuals, rows):
        r = np.sort(np.asarray(r, dtype=int))
        blocks.append(IndividualBlock(b.id, b.times[r], b.X[r], b.Z[r], b.y[r]))
    return LongitudinalDataset(tuple(blocks))


def split_train_test(dataset: LongitudinalDataset, holdout_per_individual: int = 2,
                     rng_seed=None) -> tuple[LongitudinalDataset, LongitudinalDataset]:
    """Hold out ``holdout_per_individual`` random rows of every individual."""
    k = int(holdout_per_individual)
    if k < 1:
        raise DatasetError("holdout_per_individual must be at least 1")
    short = [b.id for b in dataset.individuals if b.n_obs <= k]
    if short:
        raise DatasetError(f"individuals with n_i <= {k}: {short[:5]}")
    rng = np.random.default_rng(rng_seed)
    train_rows, test_rows = [], []
    for b in dataset.individuals:
        test = rng.choice(b.n_obs, size=k, replace=False)
        mask = np.ones(b.n_obs, dtype=bool)
        mask[test] = False
        train_rows.append(np.flatnonzero(mask))
        test_rows.append(np.sort(test))
    return subset_rows(dataset, train_rows), subset_rows(dataset, test_rows)


# --------------------------------------------------------------------------
# CSV input/output
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Column naming for the long CSV format.

    Explicit ``random``/``fixed`` column lists win over the prefixes; with
    prefixes, columns are taken in header order.
    """

    id: str = "id"
    time: str = "time"
    response: str = "y"
    random: tuple[str, ...] | None = None
    fixed: tuple[str, ...] | None = None
    random_prefix: str = "z"
    fixed_prefix: str = "x"

    @classmethod
    def parse(cls, text: str) -> "CsvSchema":
        """Read ``key=value`` lines; '#' starts a comment."""
        kw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DatasetError(f"schema line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in ("random", "fixed"):
                kw[key] = tuple(c.strip() for c in value.split(",") if c.strip())
            elif key in ("id", "time", "response", "random_prefix", "fixed_prefix"):
                kw[key] = value
            else:
                raise DatasetError(f"schema line {lineno}: unknown key {key!r}")
        return cls(**kw)

    def resolve(self, header: Sequence[str]) -> tuple[list[str], list[str]]:
        def pick(explicit, prefix):
            if explicit is not None:
                return list(explicit)
            return [h for h in header if h.startswith(prefix) and h[len(prefix):].isdigit()]

        return pick(self.random, self.random_prefix), pick(self.fixed, self.fixed_prefix)


def _data_lines(stream: TextIO) -> Iterable[str]:
    for line in stream:
        if not line.startswith("#"):
            yield line


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DatasetError(f"row {row}: non-numeric value {cell!r} in column {col!r}") from None
    if np.isnan(v):
        raise DatasetError(f"row {row}: missing value in column {col!r}")
    return v


def read_long_csv(stream: TextIO, schema: CsvSchema = CsvSchema(), with_response: bool = True):
    """Parse a long-format CSV into grouped columns.

    Returns ``(ids, times, y, Z, X, zcols, xcols)`` with rows in file order.
    Lines starting with '#' (metadata headers) are skipped.
    """
    reader = csv.reader(_data_lines(stream))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DatasetError("empty file") from None
    zcols, xcols = schema.resolve(header)
    needed = [schema.id, schema.time] + ([schema.response] if with_response else []) + zcols + xcols
    present = set(header)
    missing = [c for c in needed if c not in present]
    if missing:
        raise DatasetError(f"missing declared column(s): {missing}")
    pos = {h: k for k, h in enumerate(header)}
    num_cols = [schema.time] + ([schema.response] if with_response else []) + zcols + xcols
    take = [pos[c] for c in num_cols]
    id_pos = pos[schema.id]
    ids, cells, rownos = [], [], []
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DatasetError(f"row {rowno}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[id_pos].strip())
        cells.append([row[k] for k in take])
        rownos.append(rowno)
    if not ids:
        raise DatasetError("empty file")
    try:
        vals = np.array(cells, dtype=str).astype(np.float64)
    except ValueError:
        vals = None
    if vals is None or np.isnan(vals).any():
        # locate the offending cell for the error message
        for rowno, row in zip(rownos, cells):
            for c, cell in zip(num_cols, row):
                _parse_float(cell, rowno, c)
    vals = vals.reshape(len(ids), len(num_cols))
    times = vals[:, 0].copy()
    k = 1
    ys = vals[:, 1].copy() if with_response else np.empty(0)
    k += int(with_response)
    Z = np.ascontiguousarray(vals[:, k:k + len(zcols)])
    X = np.ascontiguousarray(vals[:, k + len(zcols):])
    return ids, times, ys, Z, X, zcols, xcols


def group_rows(ids: Sequence[str], times: np.ndarray) -> dict[str, np.ndarray]:
    """Row indices per id (first-appearance order), sorted by time."""
    order: dict[str, list[int]] = {}
    for k, i in enumerate(ids):
        order.setdefault(i, []).append(k)
    out = {}
    for i, rows in order.items():
        rows = np.array(rows)
        rows = rows[np.argsort(times[rows], kind="stable")]
        t = times[rows]
        dup = np.flatnonzero(np.diff(t) == 0)
        if dup.size:
            raise DatasetError(f"duplicate (id, time) pair: id={i!r}, time={t[dup[0]]!r}")
        out[i] = rows
    return out


def load_dataset(stream: TextIO, schema: CsvSchema = CsvSchema()) -> LongitudinalDataset:
    ids, times, y, Z, X, _, _ = read_long_csv(stream, schema)
    blocks = [IndividualBlock(i, times[r], X[r], Z[r], y[r]) for i, r in group_rows(ids, times).items()]
    return LongitudinalDataset(tuple(blocks))


def write_dataset(dataset: LongitudinalDataset, stream: TextIO, header_lines: Sequence[str] = ()) -> None:
    """Write the long CSV format; floats use repr so values round-trip exactly."""
    for line in header_lines:
        stream.write(f"# {line}\n")
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["id", "time", "y"] + [f"z{k + 1}" for k in range(dataset.q)]
               + [f"x{k + 1}" for k in range(dataset.p)])
    for b in dataset.individuals:
        for j in range(b.n_obs):
            w.writerow([b.id, repr(float(b.times[j])), repr(float(b.y[j]))]
                       + [repr(float(v)) for v in b.Z[j]] + [repr(float(v)) for v in b.X[j]])


def dataset_to_csv(dataset: LongitudinalDataset) -> str:
    buf = io.StringIO()
    write_dataset(dataset, buf)
    return buf.getvalue()
