"""Dense feature maps and a deterministic counter-based random generator.

Everything downstream (grid generation, sampling, the network stack, data
synthesis) works on row-major float arrays wrapped in :class:`FeatureMap`,
and draws randomness through :class:`Rng` so that a seed fully determines an
experiment regardless of evaluation order or worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when array dimensions violate an operation's contract."""


class RangeError(ValueError):
    """Raised for invalid numeric ranges (e.g. uniform with lo > hi)."""


class MapIndexError(IndexError):
    """Raised for out-of-bounds feature-map indices."""


@dataclass
class FeatureMap:
    """A dense H x W x C (or H x W x D x C) map of real values.

    The flat layout is row-major: index ((n*W + m)*D + l)*C + c with the
    depth axis present only for volumetric maps. `array` is the shaped
    view; `data` exposes the flat one.
    """

    array: np.ndarray

    def __post_init__(self):
        if self.array.ndim not in (3, 4):
            raise ShapeError(f"feature map must be rank 3 or 4, got rank {self.array.ndim}")
        if any(d < 1 for d in self.array.shape):
            raise ShapeError(f"feature map dims must be >= 1, got {self.array.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @property
    def depth(self) -> int | None:
        return self.array.shape[2] if self.array.ndim == 4 else None

    @property
    def channels(self) -> int:
        return self.array.shape[-1]

    @property
    def is_volume(self) -> bool:
        return self.array.ndim == 4

    @property
    def data(self) -> np.ndarray:
        return np.ascontiguousarray(self.array).reshape(-1)

    def get(self, *index: int) -> float:
        self._check_index(index)
        return float(self.array[index])

    def set(self, *index_and_value) -> None:
        *index, value = index_and_value
        self._check_index(tuple(index))
        self.array[tuple(index)] = value

    def _check_index(self, index: tuple[int, ...]) -> None:
        if len(index) != self.array.ndim:
            raise MapIndexError(
                f"expected {self.array.ndim} indices for shape {self.shape}, got {len(index)}"
            )
        for i, (j, d) in enumerate(zip(index, self.array.shape)):
            if not 0 <= j < d:
                raise MapIndexError(f"index {j} out of bounds for axis {i} of size {d}")

    def astype(self, dtype) -> "FeatureMap":
        return FeatureMap(self.array.astype(dtype))

    def copy(self) -> "FeatureMap":
        return FeatureMap(self.array.copy())

    def assert_finite(self) -> "FeatureMap":
        if not np.all(np.isfinite(self.array)):
            raise ValueError("feature map contains non-finite values")
        return self


def new_map(shape: tuple[int, ...], fill: float = 0.0, dtype=np.float64) -> FeatureMap:
    """Allocate a feature map of the given shape, every element set to `fill`."""
    if len(shape) not in (3, 4):
        raise ShapeError(f"shape must have 3 or 4 dims, got {shape}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"dims must be >= 1, got {shape}")
    return FeatureMap(np.full(shape, fill, dtype=dtype))


def from_array(values, dtype=None) -> FeatureMap:
    arr = np.asarray(values)
    if dtype is not None:
        arr = arr.astype(dtype)
    return FeatureMap(arr).assert_finite()


# ---------------------------------------------------------------------------
# Counter-based RNG (philox4x32-10).
#
# The generator is stateless apart from a draw position: draw i is a pure
# function of (seed, i), so parallel generation keyed by sample index yields
# the same values in any order and on any number of threads.
# ---------------------------------------------------------------------------

_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D57)
_PHILOX_W0 = np.uint64(0x9E3779B9)
_PHILOX_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_FORK_TAG = 0x464F524B  # distinguishes fork blocks from the draw stream

_INV_2_53 = float(2.0**-53)


def _philox_blocks(c0, c1, c2, c3, k0: int, k1: int) -> tuple[np.ndarray, np.ndarray]:
    """Run philox4x32-10 on vectors of counter words; returns two u64 words per block."""
    c0 = c0.astype(np.uint64)
    c1 = c1.astype(np.uint64)
    c2 = c2.astype(np.uint64)
    c3 = c3.astype(np.uint64)
    key0 = np.uint64(k0)
    key1 = np.uint64(k1)
    for _ in range(10):
        prod0 = c0 * _PHILOX_M0
        prod1 = c2 * _PHILOX_M1
        hi0, lo0 = prod0 >> np.uint64(32), prod0 & _MASK32
        hi1, lo1 = prod1 >> np.uint64(32), prod1 & _MASK32
        c0, c1, c2, c3 = (hi1 ^ c1 ^ key0), lo1, (hi0 ^ c3 ^ key1), lo0
        key0 = (key0 + _PHILOX_W0) & _MASK32
        key1 = (key1 + _PHILOX_W1) & _MASK32
    return (c0 << np.uint64(32)) | c1, (c2 << np.uint64(32)) | c3


class Rng:
    """Deterministic counter-based random generator.

    Equal seeds produce bit-identical streams. `fork(index)` derives an
    independent child stream from (seed, index) without consuming draws,
    which is what per-sample data generation uses.
    """

    def __init__(self, seed: int, _stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._stream = int(_stream) & 0xFFFFFFFFFFFFFFFF
        self._pos = 0  # next uniform draw index

    def _raw64(self, n: int) -> np.ndarray:
        """The next n raw 64-bit words of the stream."""
        start = self._pos
        self._pos += n
        idx = np.arange(start, start + n, dtype=np.uint64)
        blocks = idx >> np.uint64(1)
        c0 = blocks & _MASK32
        c1 = blocks >> np.uint64(32)
        c2 = np.full(n, self._stream & 0xFFFFFFFF, dtype=np.uint64)
        c3 = np.full(n, self._stream >> 32, dtype=np.uint64)
        w0, w1 = _philox_blocks(c0, c1, c2, c3, self.seed & 0xFFFFFFFF, self.seed >> 32)
        return np.where(idx & np.uint64(1) == 0, w0, w1)

    def uniform_array(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """n doubles uniform in [lo, hi)."""
        if lo > hi:
            raise RangeError(f"uniform bounds inverted: lo={lo} > hi={hi}")
        u = (self._raw64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return lo + u * (hi - lo)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return float(self.uniform_array(1, lo, hi)[0])

    def normal_array(self, n: int, mean: float = 0.0, sd: float = 1.0) -> np.ndarray:
        """n normal draws via Box-Muller on the uniform stream."""
        if sd < 0:
            raise RangeError(f"normal sd must be >= 0, got {sd}")
        m = (n + 1) // 2
        u = self.uniform_array(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[:m]))  # 1-u in (0,1], log1p(-u) finite
        t = 2.0 * np.pi * u[m:]
        z = np.concatenate([r * np.cos(t), r * np.sin(t)])[:n]
        return mean + sd * z

    def normal(self, mean: float = 0.0, sd: float = 1.0) -> float:
        return float(self.normal_array(1, mean, sd)[0])

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n integers uniform in [0, bound)."""
        if bound < 1:
            raise RangeError(f"integer bound must be >= 1, got {bound}")
        return np.minimum((self.uniform_array(n) * bound).astype(np.int64), bound - 1)

    def integer(self, bound: int) -> int:
        return int(self.integers(1, bound)[0])

    def shuffled(self, n: int) -> np.ndarray:
        """A permutation of range(n) (Fisher-Yates driven by the stream)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def fork(self, index: int) -> "Rng":
        """Child generator keyed by (seed, index); independent of this stream."""
        idx = np.asarray([index], dtype=np.uint64)
        w0, w1 = _philox_blocks(
            idx & _MASK32,
            idx >> np.uint64(32),
            np.asarray([_FORK_TAG], dtype=np.uint64),
            np.asarray([self._stream & 0xFFFFFFFF], dtype=np.uint64),
            self.seed & 0xFFFFFFFF,
            self.seed >> 32,
        )
        return Rng(int(w0[0]), _stream=int(w1[0]))


def rng_uniform(rng: Rng, lo: float, hi: float) -> float:
    return rng.uniform(lo, hi)


def rng_normal(rng: Rng, mean: float, sd: float) -> float:
    return rng.normal(mean, sd)
