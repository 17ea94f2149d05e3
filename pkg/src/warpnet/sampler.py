"""(Sub-)differentiable sampling of feature maps at arbitrary coordinates.

Forward kernels: integer (nearest pixel), bilinear, trilinear. Each comes
with backward passes to the input map (scatter of kernel weights) and to the
sampling coordinates (the piecewise-constant kernel derivative, scaled from
pixel to normalized units). A brute-force full-sum evaluator over every input
location exists purely as a test oracle; the fast paths only ever touch the
kernel's support taps.

Bitwise contract: the fast path and the oracle share the pixel conversion,
the weight association w = (w_y * w_x) * w_z, and a row-major (y, x, z) term
order, so their f64 outputs are identical to the last bit.

Coordinates outside the input contribute nothing (zero padding). At points
where a coordinate sits exactly on a pixel, the coordinate gradient takes the
"tap index >= coordinate" branch of the kernel sub-gradient; tests probe away
from those kinks.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .gridgen import SampleGrid
from .tensor import FeatureMap, ShapeError

INTEGER = "integer"
BILINEAR = "bilinear"
TRILINEAR = "trilinear"

_KINDS = (INTEGER, BILINEAR, TRILINEAR)


@dataclass(frozen=True)
class SamplingKernel:
    """Kernel tag; the three built-ins carry no free parameters."""

    kind: str

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ShapeError(f"unknown sampling kernel {self.kind!r}")

    @property
    def ndim(self) -> int:
        return 3 if self.kind == TRILINEAR else 2


def _kernel_kind(kernel) -> str:
    if isinstance(kernel, SamplingKernel):
        return kernel.kind
    if kernel in _KINDS:
        return kernel
    raise ShapeError(f"unknown sampling kernel {kernel!r}")


def to_pixel(coords: np.ndarray, n: int) -> np.ndarray:
    """Normalized [-1, 1] coordinates to pixel units: (x + 1)/2 * (n - 1).

    Values within float-noise distance of an integer snap onto it, so grids
    produced by the inverse formula land exactly on pixel centers and the
    identity warp is a true no-op.
    """
    coords = np.asarray(coords)
    scale = (n - 1) / 2.0
    px = (coords + 1.0) * scale
    if n > 1:
        tol = 16.0 * np.finfo(px.dtype).eps * (n - 1)
        snapped = np.rint(px)
        px = np.where(np.abs(px - snapped) <= tol, snapped, px)
    return px


def pixel_scale(n: int) -> float:
    """d(pixel coord)/d(normalized coord) for an axis of n pixels."""
    return (n - 1) / 2.0


# ---------------------------------------------------------------------------
# Batched fast path. Single-map operations below wrap these with B = 1.
# Axis order inside: spatial axes are (y, x) for 2D and (y, x, z) for 3D,
# matching the row-major (H, W[, D], C) array layout.
# ---------------------------------------------------------------------------


@dataclass
class BatchSample:
    """Forward context kept for the backward passes."""

    u: np.ndarray          # (B, H, W[, D], C)
    coords: np.ndarray     # (B, P, dim) normalized
    kind: str
    out: np.ndarray        # (B, P, C)


def _spatial_sizes(u: np.ndarray, kind: str) -> tuple[int, ...]:
    want_rank = 5 if kind == TRILINEAR else 4
    if u.ndim != want_rank:
        raise ShapeError(
            f"{kind} sampling expects batched rank {want_rank} input, got rank {u.ndim}"
        )
    return u.shape[1:-1]


def _pixel_axes(coords: np.ndarray, sizes: tuple[int, ...]) -> list[np.ndarray]:
    """Per spatial axis (y, x[, z]) pixel coordinates, from (x, y[, z]) columns."""
    order = (1, 0) if len(sizes) == 2 else (1, 0, 2)
    return [to_pixel(coords[..., col], sizes[axis]) for axis, col in enumerate(order)]


def batch_sample(u: np.ndarray, coords: np.ndarray, kernel) -> BatchSample:
    """Sample each batch item at its own coordinates; returns (B, P, C) values."""
    kind = _kernel_kind(kernel)
    sizes = _spatial_sizes(u, kind)
    if coords.ndim != 3 or coords.shape[2] != len(sizes):
        raise ShapeError(
            f"coords must be (B, P, {len(sizes)}) for {kind}, got {coords.shape}"
        )
    if coords.shape[0] != u.shape[0]:
        raise ShapeError("batch size mismatch between input and coords")
    b, p = coords.shape[:2]
    c = u.shape[-1]
    flat = u.reshape(b, -1, c)
    px = _pixel_axes(coords, sizes)

    out = np.zeros((b, p, c), dtype=u.dtype)
    if kind == INTEGER:
        near = [np.floor(a + 0.5) for a in px]
        valid = np.ones((b, p), dtype=bool)
        for a, n in zip(near, sizes):
            valid &= (a >= 0) & (a <= n - 1)
        idx = np.zeros((b, p), dtype=np.int64)
        for a, n in zip(near, sizes):
            idx = idx * n + np.clip(a.astype(np.int64), 0, n - 1)
        got = np.take_along_axis(flat, idx[:, :, None], axis=1)
        got[~valid] = 0.0
        return BatchSample(u, coords, kind, got)

    base = [np.floor(a) for a in px]
    for bits in itertools.product((0, 1), repeat=len(sizes)):
        w = None
        idx = np.zeros((b, p), dtype=np.int64)
        valid = np.ones((b, p), dtype=bool)
        for axis, bit in enumerate(bits):
            tap = base[axis] + bit
            # literal kernel value, matching the full-sum oracle bit for bit
            wa = 1.0 - np.abs(px[axis] - tap)
            w = wa if w is None else w * wa
            valid &= (tap >= 0) & (tap <= sizes[axis] - 1)
            idx = idx * sizes[axis] + np.clip(tap.astype(np.int64), 0, sizes[axis] - 1)
        w = np.where(valid, w, 0.0)
        got = np.take_along_axis(flat, idx[:, :, None], axis=1)
        out += got * w[:, :, None].astype(u.dtype)
    return BatchSample(u, coords, kind, out)


def batch_backward_input(saved: BatchSample, grad_out: np.ndarray) -> np.ndarray:
    """Scatter-add output gradients back through the kernel weights."""
    u, coords, kind = saved.u, saved.coords, saved.kind
    sizes = _spatial_sizes(u, kind)
    b, p = coords.shape[:2]
    c = u.shape[-1]
    if grad_out.shape != (b, p, c):
        raise ShapeError(f"grad_out must be {(b, p, c)}, got {grad_out.shape}")
    s = int(np.prod(sizes))
    px = _pixel_axes(coords, sizes)
    du = np.zeros(b * s * c, dtype=np.float64)
    boff = (np.arange(b, dtype=np.int64) * (s * c))[:, None, None]
    coff = np.arange(c, dtype=np.int64)[None, None, :]

    def scatter(idx, w):
        flat_idx = (boff + idx[:, :, None] * c + coff).reshape(-1)
        vals = (grad_out * w[:, :, None]).reshape(-1)
        du_part = np.bincount(flat_idx, weights=vals, minlength=b * s * c)
        np.add(du, du_part, out=du)

    if kind == INTEGER:
        near = [np.floor(a + 0.5) for a in px]
        valid = np.ones((b, p), dtype=bool)
        idx = np.zeros((b, p), dtype=np.int64)
        for a, n in zip(near, sizes):
            valid &= (a >= 0) & (a <= n - 1)
            idx = idx * n + np.clip(a.astype(np.int64), 0, n - 1)
        scatter(idx, valid.astype(np.float64))
    else:
        base = [np.floor(a) for a in px]
        for bits in itertools.product((0, 1), repeat=len(sizes)):
            w = None
            idx = np.zeros((b, p), dtype=np.int64)
            valid = np.ones((b, p), dtype=bool)
            for axis, bit in enumerate(bits):
                tap = base[axis] + bit
                wa = 1.0 - np.abs(px[axis] - tap)
                w = wa if w is None else w * wa
                valid &= (tap >= 0) & (tap <= sizes[axis] - 1)
                idx = idx * sizes[axis] + np.clip(tap.astype(np.int64), 0, sizes[axis] - 1)
            scatter(idx, np.where(valid, w, 0.0))
    return du.reshape(u.shape).astype(u.dtype)


def batch_backward_grid(saved: BatchSample, grad_out: np.ndarray) -> np.ndarray:
    """Gradients w.r.t. the normalized coordinates, shape (B, P, dim).

    Integer sampling has zero derivative almost everywhere, so it reports
    exact zeros; only the linear kernels can steer whatever produced the grid.
    """
    u, coords, kind = saved.u, saved.coords, saved.kind
    sizes = _spatial_sizes(u, kind)
    b, p = coords.shape[:2]
    c = u.shape[-1]
    if grad_out.shape != (b, p, c):
        raise ShapeError(f"grad_out must be {(b, p, c)}, got {grad_out.shape}")
    dcoords = np.zeros((b, p, len(sizes)), dtype=np.float64)
    if kind == INTEGER:
        return dcoords.astype(coords.dtype)

    flat = u.reshape(b, -1, c)
    px = _pixel_axes(coords, sizes)
    base = [np.floor(a) for a in px]
    naxes = len(sizes)
    col_of_axis = (1, 0) if naxes == 2 else (1, 0, 2)
    for bits in itertools.product((0, 1), repeat=naxes):
        idx = np.zeros((b, p), dtype=np.int64)
        valid = np.ones((b, p), dtype=bool)
        weights = []
        dsigns = []
        for axis, bit in enumerate(bits):
            tap = base[axis] + bit
            weights.append(1.0 - np.abs(px[axis] - tap))
            # sub-gradient of max(0, 1 - |px - tap|); ties take the tap >= px branch
            dsigns.append(np.where(np.abs(tap - px[axis]) >= 1.0, 0.0,
                                   np.where(tap >= px[axis], 1.0, -1.0)))
            valid &= (tap >= 0) & (tap <= sizes[axis] - 1)
            idx = idx * sizes[axis] + np.clip(tap.astype(np.int64), 0, sizes[axis] - 1)
        got = np.take_along_axis(flat, idx[:, :, None], axis=1).astype(np.float64)
        gdot = np.sum(got * grad_out, axis=2)  # (B, P)
        gdot = np.where(valid, gdot, 0.0)
        for axis in range(naxes):
            dw = dsigns[axis]
            for other in range(naxes):
                if other != axis:
                    dw = dw * weights[other]
            dcoords[:, :, col_of_axis[axis]] += gdot * dw * pixel_scale(sizes[axis])
    return dcoords.astype(coords.dtype)


# ---------------------------------------------------------------------------
# Single-map operations.
# ---------------------------------------------------------------------------


@dataclass
class SampleResult:
    """Warped output plus the saved forward context."""

    output: FeatureMap
    saved: BatchSample
    out_shape: tuple[int, ...]


def _check_pairing(u: FeatureMap, grid: SampleGrid, kind: str) -> None:
    want = 3 if kind == TRILINEAR else 2
    if grid.coords.shape[1] != want:
        raise ShapeError(f"{kind} requires {want}D grids, got {grid.coords.shape[1]}D")
    if (u.is_volume and want == 2) or (not u.is_volume and want == 3):
        raise ShapeError(f"{kind} kernel does not match a rank-{u.array.ndim} map")
    if len(grid.out_shape) != want:
        raise ShapeError(f"grid out_shape {grid.out_shape} does not match {want}D sampling")


def sample(u: FeatureMap, grid: SampleGrid, kernel) -> SampleResult:
    """Warp `u` to the grid's output shape using the kernel's support taps."""
    kind = _kernel_kind(kernel)
    _check_pairing(u, grid, kind)
    saved = batch_sample(u.array[None], grid.coords[None], kind)
    out_shape = tuple(grid.out_shape) + (u.channels,)
    out = FeatureMap(saved.out[0].reshape(out_shape))
    return SampleResult(out, saved, out_shape)


def backward_input(result: SampleResult, grad_out: FeatureMap) -> FeatureMap:
    """d(loss)/d(input map) given d(loss)/d(output map)."""
    if grad_out.shape != result.out_shape:
        raise ShapeError(f"grad shape {grad_out.shape} != output shape {result.out_shape}")
    g = grad_out.array.reshape(1, -1, grad_out.channels)
    return FeatureMap(batch_backward_input(result.saved, g)[0])


def backward_grid(result: SampleResult, grad_out: FeatureMap) -> np.ndarray:
    """d(loss)/d(normalized source coords), one row per output pixel."""
    if grad_out.shape != result.out_shape:
        raise ShapeError(f"grad shape {grad_out.shape} != output shape {result.out_shape}")
    g = grad_out.array.reshape(1, -1, grad_out.channels)
    return batch_backward_grid(result.saved, g)[0]


def sample_oracle(u: FeatureMap, grid: SampleGrid, kernel) -> FeatureMap:
    """Literal full double/triple sum over every input location (test oracle).

    Accumulates terms in row-major input order with the same weight
    association as the fast path, so f64 results agree bitwise.
    """
    kind = _kernel_kind(kernel)
    _check_pairing(u, grid, kind)
    sizes = u.shape[:-1]
    c = u.channels
    coords = grid.coords
    p = coords.shape[0]
    px = _pixel_axes(coords[None], sizes)
    px = [a[0] for a in px]  # (P,) per spatial axis, order (y, x[, z])

    def kmat(a: np.ndarray, n: int) -> np.ndarray:
        taps = np.arange(n, dtype=np.float64)
        if kind == INTEGER:
            return (np.floor(a + 0.5)[:, None] == taps[None, :]).astype(np.float64)
        return np.maximum(0.0, 1.0 - np.abs(a[:, None] - taps[None, :]))

    mats = [kmat(a, n) for a, n in zip(px, sizes)]
    w = mats[0][:, :, None] * mats[1][:, None, :]  # (P, H, W)
    if len(sizes) == 3:
        w = w[:, :, :, None] * mats[2][:, None, None, :]
    w = w.reshape(p, -1)
    terms = u.array.reshape(1, -1, c) * w[:, :, None]
    acc = np.zeros((p, c), dtype=u.array.dtype)
    for j in range(terms.shape[1]):  # sequential: keep the literal summation order
        acc = acc + terms[:, j, :]
    return FeatureMap(acc.reshape(tuple(grid.out_shape) + (c,)))


# ---------------------------------------------------------------------------
# Depth flattening (3D -> 2D projection by summing over depth).
# ---------------------------------------------------------------------------


def flatten_depth(v: FeatureMap) -> FeatureMap:
    """Sum a volume over its depth axis, producing an H x W x C projection."""
    if not v.is_volume:
        raise ShapeError("flatten_depth expects a rank-4 volume")
    return FeatureMap(v.array.sum(axis=2))


def flatten_depth_backward(grad_out: FeatureMap, depth: int) -> FeatureMap:
    """Broadcast a 2D gradient across all depth slices of the input volume."""
    if grad_out.array.ndim != 3:
        raise ShapeError("flatten_depth gradient must be rank 3")
    g = grad_out.array
    return FeatureMap(np.broadcast_to(g[:, :, None, :],
                                      (g.shape[0], g.shape[1], depth, g.shape[2])).copy())
