"""Sparse vector primitives and the sparse input layer.

A K-sparse D-dimensional vector is stored as parallel (index, value) arrays
with strictly increasing indices and no explicit zeros.  The two kernels that
matter are `gather_rows_weighted` (M^T s, touching only the K rows of M named
by s) and `scatter_rank_one` (M += scale * s g^T, same K rows), both O(K d).

The on-disk example format is plain UTF-8 text: a header line ``D_in D K_in K``
followed by one example per line, ``input_pairs<TAB>target_pairs`` where each
side is whitespace-separated ``index:value`` tokens.
"""

from __future__ import annotations

import dataclasses
from typing import Iterable, NamedTuple, Sequence

import numpy as np


@dataclasses.dataclass(frozen=True, eq=False)
class SparseVec:
    """Canonical K-sparse vector: sorted unique indices, finite nonzero values."""

    dim: int
    indices: np.ndarray  # int64, strictly increasing, in [0, dim)
    values: np.ndarray   # float64, finite, nonzero

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.ndim != 1 or val.ndim != 1 or idx.shape != val.shape:
            raise ValueError("indices and values must be 1-d arrays of equal length")
        if idx.size > self.dim:
            raise ValueError(f"{idx.size} entries exceed dim {self.dim}")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.dim:
                raise ValueError("index out of range")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("indices must be strictly increasing")
        if not np.all(np.isfinite(val)):
            raise ValueError("values must be finite")
        if np.any(val == 0.0):
            raise ValueError("explicit zeros are not stored")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @classmethod
    def empty(cls, dim: int) -> "SparseVec":
        return cls(dim, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))

    @classmethod
    def from_pairs(cls, dim: int, pairs: Iterable[tuple[int, float]]) -> "SparseVec":
        """Build a canonical vector: sorts by index, drops zero values.

        Duplicate indices are an error, not merged: the K-sparsity cost
        contract depends on entry counts being honest.
        """
        items = [(int(i), float(v)) for i, v in pairs if float(v) != 0.0]
        items.sort(key=lambda p: p[0])
        idx = np.array([i for i, _ in items], dtype=np.int64)
        if idx.size and np.any(np.diff(idx) == 0):
            dup = int(idx[np.nonzero(np.diff(idx) == 0)[0][0]])
            raise ValueError(f"duplicate index {dup}")
        val = np.array([v for _, v in items], dtype=np.float64)
        return cls(dim, idx, val)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseVec):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )


def parse_sparse_line(text: str, dim: int) -> SparseVec:
    """Parse whitespace-separated ``index:value`` tokens into a canonical SparseVec.

    An empty (or all-whitespace) line is the zero vector.  Malformed tokens,
    out-of-range indices and duplicate indices raise ValueError; explicit
    zero values are dropped.
    """
    pairs = []
    for tok in text.split():
        head, sep, tail = tok.partition(":")
        if not sep:
            raise ValueError(f"malformed token {tok!r}: expected index:value")
        try:
            i = int(head)
            v = float(tail)
        except ValueError as exc:
            raise ValueError(f"malformed token {tok!r}: {exc}") from None
        if not 0 <= i < dim:
            raise ValueError(f"index {i} out of range for dim {dim}")
        if not np.isfinite(v):
            raise ValueError(f"non-finite value in token {tok!r}")
        pairs.append((i, v))
    seen = {i for i, _ in pairs}
    if len(seen) != len(pairs):
        # from_pairs would also catch this, but only after dropping zeros
        raise ValueError("duplicate index in line")
    return SparseVec.from_pairs(dim, pairs)


def format_sparse_line(s: SparseVec) -> str:
    """Inverse of parse_sparse_line; 17 significant digits round-trip doubles exactly."""
    return " ".join(f"{i}:{v:.17g}" for i, v in zip(s.indices, s.values))


def sparse_sq_norm(s: SparseVec) -> float:
    """Sum of squared stored values; O(nnz)."""
    return float(s.values @ s.values)


def sparse_dot(a: SparseVec, b: SparseVec) -> float:
    """Dot product of two sparse vectors over their merged index support."""
    if a.dim != b.dim:
        raise ValueError(f"dim mismatch: {a.dim} vs {b.dim}")
    _, ia, ib = np.intersect1d(a.indices, b.indices, assume_unique=True, return_indices=True)
    return float(a.values[ia] @ b.values[ib])


def gather_rows_weighted(M: np.ndarray, s: SparseVec) -> np.ndarray:
    """M^T s using only the rows of M named by s: sum_k v_k M[u_k, :].  O(K d)."""
    if M.ndim != 2:
        raise ValueError("M must be 2-d")
    if s.dim != M.shape[0]:
        raise ValueError(f"sparse dim {s.dim} != rows {M.shape[0]}")
    if s.nnz == 0:
        return np.zeros(M.shape[1])
    return s.values @ M[s.indices]


def scatter_rank_one(M: np.ndarray, s: SparseVec, g: np.ndarray, scale: float) -> None:
    """In-place M += scale * densify(s) g^T touching only the K rows in s.  O(K d)."""
    if M.ndim != 2 or g.ndim != 1:
        raise ValueError("M must be 2-d and g 1-d")
    if s.dim != M.shape[0]:
        raise ValueError(f"sparse dim {s.dim} != rows {M.shape[0]}")
    if g.shape[0] != M.shape[1]:
        raise ValueError(f"g length {g.shape[0]} != cols {M.shape[1]}")
    if s.nnz == 0:
        return
    # indices are unique by invariant, so fancy-index += is safe
    M[s.indices] += np.outer(scale * s.values, g)


def input_forward(W1: np.ndarray, x: SparseVec) -> np.ndarray:
    """Forward pass of the sparse input layer: a1 = W1^T x."""
    return gather_rows_weighted(W1, x)


def input_update(W1: np.ndarray, x: SparseVec, grad_a1: np.ndarray, eta: float) -> None:
    """Gradient step on the input weights: W1 -= eta * x grad_a1^T."""
    scatter_rank_one(W1, x, grad_a1, -eta)


class DatasetHeader(NamedTuple):
    D_in: int
    D: int
    K_in: int
    K: int


def write_sparse_examples(
    path,
    header: DatasetHeader,
    examples: Iterable[tuple[SparseVec, SparseVec]],
) -> int:
    """Write (input, target) pairs in the text format; returns the example count."""
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{header.D_in} {header.D} {header.K_in} {header.K}\n")
        for x, y in examples:
            if x.dim != header.D_in or y.dim != header.D:
                raise ValueError("example dims do not match header")
            f.write(format_sparse_line(x) + "\t" + format_sparse_line(y) + "\n")
            n += 1
    return n


def read_sparse_examples(path) -> tuple[DatasetHeader, list[tuple[SparseVec, SparseVec]]]:
    """Read a dataset written by write_sparse_examples."""
    with open(path, "r", encoding="utf-8") as f:
        head = f.readline().split()
        if len(head) != 4:
            raise ValueError(f"bad header line in {path}: expected 'D_in D K_in K'")
        header = DatasetHeader(*(int(t) for t in head))
        examples = []
        for lineno, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            left, sep, right = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: missing tab between input and target")
            x = parse_sparse_line(left, header.D_in)
            y = parse_sparse_line(right, header.D)
            if x.nnz > header.K_in or y.nnz > header.K:
                raise ValueError(f"{path}:{lineno}: sparsity exceeds header bound")
            examples.append((x, y))
    return header, examples


def random_sparse(rng: np.random.Generator, dim: int, k: int, scale: float = 1.0) -> SparseVec:
    """K-sparse vector with uniform support and N(0, scale^2) values."""
    if k > dim:
        raise ValueError(f"k={k} exceeds dim={dim}")
    idx = np.sort(rng.choice(dim, size=k, replace=False).astype(np.int64))
    val = rng.standard_normal(k) * scale
    val[val == 0.0] = scale if scale != 0.0 else 1.0  # measure-zero guard
    return SparseVec(dim, idx, val)
