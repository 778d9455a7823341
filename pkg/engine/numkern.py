"""
Dense float32 kernels for the toy VAR engine.

Every array primitive the engine needs lives here: token maps and index lists,
a fixed-order matrix product, row softmax, spatial resampling, pooling, top-k
selection and the gather/scatter pair used by token pruning. Results are
bit-exact and platform independent for identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import numpy.typing as npt

from config import ArgumentError, ShapeError

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

FlatMatrix = npt.NDArray[np.float32]
InterpMode = Literal["nearest", "bilinear"]

DTYPE = np.float32


@dataclass(frozen=True, eq=False)
class TokenMap:
    """An (h, w, d) grid of d-channel tokens, token index t = row * w + col."""

    data: npt.NDArray[np.float32]

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=DTYPE)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ShapeError(f"token map needs shape (h, w, d) with all dims >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ArgumentError("token map contains NaN or Inf")
        object.__setattr__(self, "data", arr)

    @property
    def h(self) -> int:
        return int(self.data.shape[0])

    @property
    def w(self) -> int:
        return int(self.data.shape[1])

    @property
    def d(self) -> int:
        return int(self.data.shape[2])

    @property
    def size(self) -> tuple[int, int]:
        return self.h, self.w

    @property
    def num_tokens(self) -> int:
        return self.h * self.w

    def flat(self) -> FlatMatrix:
        """Row-major (h*w, d) view of the tokens."""
        return self.data.reshape(self.num_tokens, self.d)

    @classmethod
    def from_tokens(cls, tokens: npt.ArrayLike, h: int, w: int) -> TokenMap:
        arr = np.asarray(tokens, dtype=DTYPE)
        if arr.ndim != 2 or arr.shape[0] != h * w:
            raise ShapeError(f"cannot lay out tokens of shape {arr.shape} on a {h}x{w} grid")
        return cls(arr.reshape(h, w, arr.shape[1]))

    @classmethod
    def constant(cls, h: int, w: int, d: int, value: float) -> TokenMap:
        return cls(np.full((h, w, d), value, dtype=DTYPE))

    @classmethod
    def zeros(cls, h: int, w: int, d: int) -> TokenMap:
        return cls(np.zeros((h, w, d), dtype=DTYPE))

    def array_equal(self, other: TokenMap) -> bool:
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class IndexList:
    """Strictly increasing token indices into a map of ``capacity`` tokens."""

    indices: npt.NDArray[np.int64]
    capacity: int

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if self.capacity < 0:
            raise ArgumentError(f"negative capacity {self.capacity}")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.capacity:
                raise ArgumentError(f"index out of range for capacity {self.capacity}")
            if idx.size > 1 and not bool(np.all(np.diff(idx) > 0)):
                raise ArgumentError("indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return int(self.indices.size)

    def tolist(self) -> list[int]:
        return [int(i) for i in self.indices]

    def mask(self) -> npt.NDArray[np.bool_]:
        out = np.zeros(self.capacity, dtype=np.bool_)
        out[self.indices] = True
        return out

    @classmethod
    def full(cls, capacity: int) -> IndexList:
        return cls(np.arange(capacity, dtype=np.int64), capacity)


# ---------------------------
# Matrix kernels
# ---------------------------


def _as_matrix(m: npt.ArrayLike, name: str) -> FlatMatrix:
    arr = np.ascontiguousarray(m, dtype=DTYPE)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


if HAS_NUMBA:

    @njit(cache=True)
    def _matmul_ikj(a, b):  # type: ignore[no-untyped-def]
        n, m = a.shape
        p = b.shape[1]
        out = np.zeros((n, p), dtype=np.float32)
        for i in range(n):
            for k in range(m):
                aik = a[i, k]
                for j in range(p):
                    out[i, j] += aik * b[k, j]
        return out

else:

    def _matmul_ikj(a: FlatMatrix, b: FlatMatrix) -> FlatMatrix:
        out = np.zeros((a.shape[0], b.shape[1]), dtype=DTYPE)
        for k in range(a.shape[1]):
            out += a[:, k, None] * b[None, k, :]
        return out


def matmul(a: npt.ArrayLike, b: npt.ArrayLike) -> FlatMatrix:
    """
    Matrix product with a fixed summation order.

    Every output element accumulates ``a[i, k] * b[k, j]`` for k = 0, 1, ...
    in float32, starting from zero. No BLAS call is involved, so results do
    not depend on the installed BLAS or its threading.

    Raises:
        ShapeError: If a.cols != b.rows
    """
    a_m = _as_matrix(a, "a")
    b_m = _as_matrix(b, "b")
    if a_m.shape[1] != b_m.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a_m.shape} x {b_m.shape}")
    return _matmul_ikj(a_m, b_m)


def softmax_rows(m: npt.ArrayLike) -> FlatMatrix:
    arr = _as_matrix(m, "m")
    shifted = arr - arr.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).astype(DTYPE, copy=False)


def add(a: TokenMap, b: TokenMap) -> TokenMap:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"cannot add maps of shape {a.data.shape} and {b.data.shape}")
    return TokenMap(a.data + b.data)


def layer_norm(x: FlatMatrix, eps: float = 1e-5) -> FlatMatrix:
    """Per-row normalization to zero mean and unit variance (no affine params)."""
    arr = _as_matrix(x, "x")
    mean = arr.mean(axis=1, keepdims=True, dtype=DTYPE)
    centered = arr - mean
    var = (centered * centered).mean(axis=1, keepdims=True, dtype=DTYPE)
    return (centered / np.sqrt(var + DTYPE(eps))).astype(DTYPE, copy=False)


_GELU_C = DTYPE(np.sqrt(2.0 / np.pi))


def gelu(x: FlatMatrix) -> FlatMatrix:
    arr = np.asarray(x, dtype=DTYPE)
    inner = _GELU_C * (arr + DTYPE(0.044715) * arr * arr * arr)
    return (DTYPE(0.5) * arr * (DTYPE(1.0) + np.tanh(inner))).astype(DTYPE, copy=False)


# ---------------------------
# Spatial ops
# ---------------------------


def _nearest_index(n_dst: int, n_src: int) -> npt.NDArray[np.int64]:
    # floor((i + 0.5) * n_src / n_dst) in exact integer arithmetic
    i = np.arange(n_dst, dtype=np.int64)
    return np.minimum(((2 * i + 1) * n_src) // (2 * n_dst), n_src - 1)


def _bilinear_axis(
    n_dst: int, n_src: int
) -> tuple[npt.NDArray[np.int64], npt.NDArray[np.int64], npt.NDArray[np.float32]]:
    src = (np.arange(n_dst, dtype=np.float64) + 0.5) * n_src / n_dst - 0.5
    src = np.clip(src, 0.0, n_src - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = (src - i0).astype(DTYPE)
    return i0, i1, frac


def resize(x: TokenMap, target: tuple[int, int], mode: InterpMode = "bilinear") -> TokenMap:
    """
    Resample a token map to ``target`` = (h, w), channel by channel.

    Nearest picks source index floor((i + 0.5) * src / dst). Bilinear uses
    half-pixel centres with clamped edges. Same-size calls return a copy.

    Raises:
        ArgumentError: If a target dimension is < 1 or the mode is unknown
    """
    h_dst, w_dst = int(target[0]), int(target[1])
    if h_dst < 1 or w_dst < 1:
        raise ArgumentError(f"resize target must be >= 1 in both dims, got {target}")
    if (h_dst, w_dst) == x.size:
        return TokenMap(x.data.copy())

    if mode == "nearest":
        rows = _nearest_index(h_dst, x.h)
        cols = _nearest_index(w_dst, x.w)
        return TokenMap(x.data[np.ix_(rows, cols)])

    if mode == "bilinear":
        y0, y1, fy = _bilinear_axis(h_dst, x.h)
        x0, x1, fx = _bilinear_axis(w_dst, x.w)
        v00 = x.data[np.ix_(y0, x0)]
        v01 = x.data[np.ix_(y0, x1)]
        v10 = x.data[np.ix_(y1, x0)]
        v11 = x.data[np.ix_(y1, x1)]
        fx_b = fx[None, :, None]
        fy_b = fy[:, None, None]
        top = v00 + fx_b * (v01 - v00)
        bottom = v10 + fx_b * (v11 - v10)
        return TokenMap(top + fy_b * (bottom - top))

    raise ArgumentError(f"unknown interpolation mode {mode!r}")


def global_avg_pool(x: TokenMap) -> npt.NDArray[np.float32]:
    """Per-channel mean over all h*w tokens (length-d vector)."""
    total = np.add.reduce(x.flat(), axis=0, dtype=DTYPE)
    return (total / DTYPE(x.num_tokens)).astype(DTYPE, copy=False)


# ---------------------------
# Selection
# ---------------------------


def topk_indices(scores: npt.ArrayLike, k: int) -> IndexList:
    """
    Indices of the k largest scores, ascending.

    Ties go to the smaller index (stable descending sort).

    Raises:
        ArgumentError: If k < 0 or k > len(scores)
    """
    s = np.asarray(scores).reshape(-1)
    total = int(s.size)
    if k < 0 or k > total:
        raise ArgumentError(f"k={k} outside [0, {total}]")
    order = np.argsort(-s, kind="stable")[:k]
    return IndexList(np.sort(order), total)


def gather_rows(x: TokenMap, idx: IndexList) -> TokenMap:
    """Kept tokens of ``x`` as a (1, |idx|, d) map.

    An empty index list cannot form a token map; callers handle keep == 0 themselves.
    """
    if idx.capacity != x.num_tokens:
        raise ArgumentError(f"index capacity {idx.capacity} != token count {x.num_tokens}")
    if len(idx) == 0:
        raise ArgumentError("cannot gather an empty index list")
    return TokenMap(x.flat()[idx.indices][None, :, :])


def scatter_rows(base: TokenMap, idx: IndexList, src: TokenMap | None) -> TokenMap:
    """Copy of ``base`` with token ``idx[j]`` replaced by token j of ``src``."""
    if idx.capacity != base.num_tokens:
        raise ArgumentError(f"index capacity {idx.capacity} != token count {base.num_tokens}")
    out = base.flat().copy()
    if len(idx) == 0:
        return TokenMap(out.reshape(base.data.shape))
    if src is None or src.num_tokens != len(idx):
        got = 0 if src is None else src.num_tokens
        raise ArgumentError(f"scatter source has {got} tokens for {len(idx)} slots")
    if src.d != base.d:
        raise ArgumentError(f"channel mismatch: base d={base.d}, source d={src.d}")
    out[idx.indices] = src.flat()
    return TokenMap(out.reshape(base.data.shape))
