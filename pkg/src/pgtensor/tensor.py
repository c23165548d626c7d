"""Sparse binary tensors: storage, text I/O, validation and mini-batch sampling."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class TensorFormatError(ValueError):
    """Malformed tensor file.  ``lineno`` is 1-based."""

    def __init__(self, msg, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            msg = f"line {lineno}: {msg}"
        super().__init__(msg)


class TensorBoundsError(TensorFormatError):
    pass


class EmptyTensorError(ValueError):
    pass


@dataclass(frozen=True)
class SparseBinaryTensor:
    """K-mode binary tensor stored as the coordinate list of its ones.

    ``ones`` is an ``(nnz, K)`` int64 array, deduplicated and sorted by linear
    index.  Zeros are implicit.  ``n_collapsed`` records how many duplicate
    coordinates were dropped on construction.
    """

    shape: tuple
    ones: np.ndarray
    n_collapsed: int = 0
    _keys: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        if len(shape) < 2:
            raise ValueError(f"need at least 2 modes, got {len(shape)}")
        if any(d < 1 for d in shape):
            raise ValueError(f"every dimension must be >= 1, got {shape}")
        ones = np.asarray(self.ones, dtype=np.int64).reshape(-1, len(shape))
        if ones.size:
            lo = ones.min(axis=0)
            hi = ones.max(axis=0)
            if np.any(lo < 0) or np.any(hi >= np.array(shape)):
                raise TensorBoundsError("index out of range for shape %s" % (shape,))
        keys = np.ravel_multi_index(tuple(ones.T), shape) if ones.size else np.empty(0, np.int64)
        keys, first = np.unique(keys, return_index=True)
        collapsed = len(ones) - len(keys)
        ones = ones[first]
        ones.setflags(write=False)
        keys.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "ones", ones)
        object.__setattr__(self, "n_collapsed", self.n_collapsed + collapsed)
        object.__setattr__(self, "_keys", keys)

    @property
    def K(self):
        return len(self.shape)

    @property
    def nnz(self):
        return len(self.ones)

    @property
    def size(self):
        return math.prod(self.shape)

    @property
    def keys(self):
        return self._keys

    def contains(self, index):
        """Membership test for an ``(m, K)`` array of index tuples."""
        index = np.atleast_2d(np.asarray(index, dtype=np.int64))
        keys = np.ravel_multi_index(tuple(index.T), self.shape)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, max(len(self._keys) - 1, 0))
        if not len(self._keys):
            return np.zeros(len(keys), dtype=bool)
        return self._keys[pos] == keys

    def same_coordinates(self, other):
        return self.shape == other.shape and np.array_equal(self._keys, other._keys)


@dataclass
class MiniBatch:
    index: np.ndarray  # (B, K) int64
    y: np.ndarray  # (B,) int8 in {0, 1}
    iteration: int = 1

    def __len__(self):
        return len(self.y)


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line


def load_tensor(path) -> SparseBinaryTensor:
    """Read a tensor file: a header of K dims, then one index tuple per line."""
    lines = _data_lines(path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise TensorFormatError("empty file, missing header") from None
    try:
        shape = tuple(int(tok) for tok in header.split())
    except ValueError:
        raise TensorFormatError(f"bad header {header!r}", lineno) from None
    if len(shape) < 2 or any(d < 1 for d in shape):
        raise TensorFormatError(f"header must list >= 2 positive dims, got {header!r}", lineno)
    K = len(shape)
    dims = np.array(shape)
    rows = []
    for lineno, line in lines:
        toks = line.split()
        if len(toks) != K:
            raise TensorFormatError(f"expected {K} indices, got {len(toks)}", lineno)
        try:
            idx = [int(tok) for tok in toks]
        except ValueError:
            raise TensorFormatError(f"non-integer index in {line!r}", lineno) from None
        arr = np.array(idx)
        if np.any(arr < 0) or np.any(arr >= dims):
            raise TensorBoundsError(f"index {tuple(idx)} outside shape {shape}", lineno)
        rows.append(idx)
    ones = np.array(rows, dtype=np.int64).reshape(-1, K)
    tensor = SparseBinaryTensor(shape, ones)
    if tensor.n_collapsed:
        log.warning("%s: collapsed %d duplicate entries", path, tensor.n_collapsed)
    return tensor


def save_tensor(tensor: SparseBinaryTensor, path):
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(" ".join(str(d) for d in tensor.shape) + "\n")
        np.savetxt(fh, tensor.ones, fmt="%d", delimiter=" ")


def validate(tensor: SparseBinaryTensor) -> dict:
    """Summary report; never raises.

    ``density`` is the overall fill fraction.  ``mode_density[k][j]`` is the
    fraction of the slice ``i_k = j`` that is filled.
    """
    dims = np.array(tensor.shape)
    mode_density = []
    out_of_range = 0
    if tensor.nnz:
        out_of_range = int(np.sum(np.any((tensor.ones < 0) | (tensor.ones >= dims), axis=1)))
    for k, n in enumerate(tensor.shape):
        counts = np.bincount(tensor.ones[:, k], minlength=n) if tensor.nnz else np.zeros(n)
        slice_size = tensor.size // n
        mode_density.append((counts / slice_size).tolist())
    density = tensor.nnz / tensor.size
    return {
        "shape": list(tensor.shape),
        "nnz": tensor.nnz,
        "density": density,
        "mode_density": mode_density,
        "duplicates_collapsed": tensor.n_collapsed,
        "out_of_range": out_of_range,
        "empty": tensor.nnz == 0,
    }


def sample_minibatch(tensor: SparseBinaryTensor, size, neg_ratio, rng, iteration=1) -> MiniBatch:
    """Draw ``ceil(size * (1 - neg_ratio))`` stored ones with replacement, and
    fill the rest with uniformly drawn index tuples that are not stored ones."""
    if size < 1:
        raise ValueError("batch size must be >= 1")
    if not 0.0 <= neg_ratio <= 1.0:
        raise ValueError("neg_ratio must lie in [0, 1]")
    n_pos = math.ceil(size * (1.0 - neg_ratio))
    n_neg = size - n_pos
    if n_pos and tensor.nnz == 0:
        raise EmptyTensorError("tensor has no ones to sample positives from")
    if n_neg and tensor.nnz == tensor.size:
        raise EmptyTensorError("tensor is full, no zeros to sample")
    pos = tensor.ones[rng.integers(0, tensor.nnz, size=n_pos)] if n_pos else np.empty((0, tensor.K), np.int64)
    neg = np.empty((0, tensor.K), dtype=np.int64)
    dims = np.array(tensor.shape)
    while len(neg) < n_neg:
        need = n_neg - len(neg)
        cand = (rng.random((need, tensor.K)) * dims).astype(np.int64)
        cand = cand[~tensor.contains(cand)]
        neg = np.concatenate([neg, cand])
    index = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(n_pos, np.int8), np.zeros(n_neg, np.int8)])
    return MiniBatch(index=index, y=y, iteration=iteration)
