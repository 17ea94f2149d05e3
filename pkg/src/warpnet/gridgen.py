"""Output grids and parameterised coordinate transforms.

The output of a warp is defined on a regular grid of normalized coordinates
in [-1, 1]. A transform maps those target coordinates to source coordinates
in the input map; every family also exposes the exact Jacobian of the source
coordinates with respect to its parameters so losses can be pushed back into
whatever predicted them.

Families:
  affine      six values (a11, a12, a13, a21, a22, a23), row-major 2x3 matrix
  attention   (s, tx, ty): isotropic scale + translation (cropping)
  projective  eight values of a 3x3 homography, bottom-right entry fixed at 1
  tps         2K source-offset values for a fixed K-point control lattice
  affine3d    twelve values, row-major 3x4 matrix
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

EPS_W = 1e-6  # homogeneous denominator floor; smaller means degenerate
TPS_RIDGE = 1e-9
DEFAULT_TPS_POINTS = 16

_PARAM_COUNTS = {"affine": 6, "attention": 3, "projective": 8, "affine3d": 12}
_IDENTITY = {
    "affine": (1.0, 0.0, 0.0, 0.0, 1.0, 0.0),
    "attention": (1.0, 0.0, 0.0),
    "projective": (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0),
    "affine3d": (1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0),
}


class DegenerateTransformError(ValueError):
    """Projective transform whose homogeneous denominator vanishes on the grid."""


@dataclass(frozen=True)
class Transform:
    """A tagged transform: family name plus its parameter vector."""

    family: str
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.family == "tps":
            if self.values.size < 8 or self.values.size % 2 != 0:
                raise ShapeError(f"tps expects 2K offsets (K >= 4), got {self.values.size}")
            k = self.values.size // 2
            r = int(round(np.sqrt(k)))
            if r * r != k:
                raise ShapeError(f"tps control count must be a square number, got {k}")
        elif self.family in _PARAM_COUNTS:
            want = _PARAM_COUNTS[self.family]
            if self.values.size != want:
                raise ShapeError(
                    f"{self.family} expects {want} values, got {self.values.size}"
                )
        else:
            raise ShapeError(f"unknown transform family {self.family!r}")

    @property
    def ndim_source(self) -> int:
        return 3 if self.family == "affine3d" else 2

    @property
    def control_points(self) -> int:
        if self.family != "tps":
            raise ShapeError("control_points only defined for tps transforms")
        return self.values.size // 2

    def to_record(self) -> dict:
        return {"family": self.family, "values": [float(v) for v in self.values]}

    @staticmethod
    def from_record(record: dict) -> "Transform":
        return Transform(record["family"], np.asarray(record["values"], dtype=np.float64))


def identity_transform(family: str, control_points: int = DEFAULT_TPS_POINTS) -> Transform:
    if family == "tps":
        return Transform("tps", np.zeros(2 * control_points))
    if family not in _IDENTITY:
        raise ShapeError(f"unknown transform family {family!r}")
    return Transform(family, np.array(_IDENTITY[family]))


@dataclass(frozen=True)
class RegularGrid:
    """Normalized target coordinates of every output pixel, row-major."""

    points: np.ndarray  # (P, 2) or (P, 3), columns (x, y[, z])
    out_shape: tuple[int, ...]


@dataclass(frozen=True)
class SampleGrid:
    """Source coordinates to sample at, one row per output pixel."""

    coords: np.ndarray  # (P, 2) or (P, 3)
    out_shape: tuple[int, ...]


@dataclass(frozen=True)
class GridJacobian:
    """Dense per-pixel partials d(source coords)/d(params), shape (P, dim, n_params)."""

    jac: np.ndarray
    family: str


def axis_coords(n: int) -> np.ndarray:
    """Normalized coordinates of an axis of n pixels: -1 + 2i/(n-1), or 0 for n = 1."""
    if n < 1:
        raise ShapeError(f"axis size must be >= 1, got {n}")
    if n == 1:
        return np.zeros(1)
    return -1.0 + 2.0 * np.arange(n, dtype=np.float64) / (n - 1)


def regular_grid(out_shape: tuple[int, ...]) -> RegularGrid:
    """Row-major grid of output-pixel coordinates for a (H', W'[, D']) shape."""
    if len(out_shape) not in (2, 3):
        raise ShapeError(f"grid shape must be (H, W) or (H, W, D), got {out_shape}")
    if any(d < 1 for d in out_shape):
        raise ShapeError(f"grid dims must be >= 1, got {out_shape}")
    if len(out_shape) == 2:
        h, w = out_shape
        ys, xs = axis_coords(h), axis_coords(w)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        pts = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    else:
        h, w, d = out_shape
        ys, xs, zs = axis_coords(h), axis_coords(w), axis_coords(d)
        gy, gx, gz = np.meshgrid(ys, xs, zs, indexing="ij")
        pts = np.stack([gx.reshape(-1), gy.reshape(-1), gz.reshape(-1)], axis=1)
    return RegularGrid(pts, tuple(out_shape))


# ---------------------------------------------------------------------------
# Thin plate spline support.
#
# The control lattice is fixed (a sqrt(K) x sqrt(K) grid over [-1,1]^2); the
# transform's parameters are per-control source offsets. Because the lattice
# never moves, the fitted map is linear in the control values and collapses
# to a constant (P x K) basis matrix per output grid.
# ---------------------------------------------------------------------------


def tps_lattice(control_points: int = DEFAULT_TPS_POINTS) -> np.ndarray:
    """Row-major control lattice over [-1,1]^2, shape (K, 2)."""
    k = int(round(np.sqrt(control_points)))
    if k * k != control_points or k < 2:
        raise ShapeError(f"control count must be a square >= 4, got {control_points}")
    axis = np.linspace(-1.0, 1.0, k)
    gy, gx = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    # phi(r) = r^2 log(r^2), with phi(0) = 0
    out = np.zeros_like(r2)
    pos = r2 > 0
    out[pos] = r2[pos] * np.log(r2[pos])
    return out


def tps_basis(points: np.ndarray, control_points: int = DEFAULT_TPS_POINTS,
              ridge: float = TPS_RIDGE) -> np.ndarray:
    """Basis matrix M (P x K): source coord at point p is M[p] . control values.

    Solves the standard interpolation system with affine side conditions once
    for unit control values; a small ridge on the kernel block keeps the solve
    well conditioned without disturbing exactly-affine solutions.
    """
    ctrl = tps_lattice(control_points)
    k = ctrl.shape[0]
    d2 = np.sum((ctrl[:, None, :] - ctrl[None, :, :]) ** 2, axis=2)
    phi_cc = _tps_kernel(d2)
    p_aff = np.concatenate([np.ones((k, 1)), ctrl], axis=1)  # (K, 3)
    lmat = np.zeros((k + 3, k + 3))
    lmat[:k, :k] = phi_cc + ridge * np.eye(k)
    lmat[:k, k:] = p_aff
    lmat[k:, :k] = p_aff.T
    solved = np.linalg.solve(lmat, np.concatenate([np.eye(k), np.zeros((3, k))]))
    pts = np.asarray(points, dtype=np.float64)
    d2q = np.sum((pts[:, None, :] - ctrl[None, :, :]) ** 2, axis=2)
    q = np.concatenate([_tps_kernel(d2q), np.ones((pts.shape[0], 1)), pts], axis=1)
    return q @ solved  # (P, K)


# ---------------------------------------------------------------------------
# Forward application and Jacobians.
# ---------------------------------------------------------------------------


def _check_dims(params: Transform, grid: RegularGrid) -> None:
    if params.ndim_source != grid.points.shape[1]:
        raise ShapeError(
            f"{params.family} is {params.ndim_source}D but grid points are "
            f"{grid.points.shape[1]}D"
        )


def _attention_to_affine(values: np.ndarray) -> np.ndarray:
    s, tx, ty = values
    return np.array([s, 0.0, tx, 0.0, s, ty])


def _projective_denominator(values: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    w = values[6] * x + values[7] * y + 1.0
    bad = np.abs(w) <= EPS_W
    if np.any(bad):
        raise DegenerateTransformError(
            f"homogeneous denominator |w| <= {EPS_W} at {int(np.count_nonzero(bad))} "
            "grid point(s)"
        )
    return w


def apply_transform(params: Transform, grid: RegularGrid,
                    tps_basis_matrix: np.ndarray | None = None) -> SampleGrid:
    """Map the regular grid through the transform, producing source coordinates.

    `tps_basis_matrix` lets callers reuse a precomputed basis for the grid;
    it is computed on the fly otherwise.
    """
    _check_dims(params, grid)
    pts = grid.points
    v = params.values
    if params.family in ("affine", "attention"):
        a = v if params.family == "affine" else _attention_to_affine(v)
        x, y = pts[:, 0], pts[:, 1]
        coords = np.stack([a[0] * x + a[1] * y + a[2],
                           a[3] * x + a[4] * y + a[5]], axis=1)
    elif params.family == "projective":
        x, y = pts[:, 0], pts[:, 1]
        w = _projective_denominator(v, x, y)
        coords = np.stack([(v[0] * x + v[1] * y + v[2]) / w,
                           (v[3] * x + v[4] * y + v[5]) / w], axis=1)
    elif params.family == "tps":
        k = params.control_points
        basis = tps_basis(pts, k) if tps_basis_matrix is None else tps_basis_matrix
        ctrl = tps_lattice(k)
        coords = np.stack([basis @ (ctrl[:, 0] + v[:k]),
                           basis @ (ctrl[:, 1] + v[k:])], axis=1)
    else:  # affine3d
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        coords = np.stack([v[0] * x + v[1] * y + v[2] * z + v[3],
                           v[4] * x + v[5] * y + v[6] * z + v[7],
                           v[8] * x + v[9] * y + v[10] * z + v[11]], axis=1)
    return SampleGrid(coords, grid.out_shape)


def transform_jacobian(params: Transform, grid: RegularGrid,
                       tps_basis_matrix: np.ndarray | None = None) -> GridJacobian:
    """Exact partials of every source coordinate w.r.t. the parameter vector."""
    _check_dims(params, grid)
    pts = grid.points
    p = pts.shape[0]
    v = params.values
    ones = np.ones(p)
    if params.family == "affine":
        x, y = pts[:, 0], pts[:, 1]
        jac = np.zeros((p, 2, 6))
        jac[:, 0, 0], jac[:, 0, 1], jac[:, 0, 2] = x, y, ones
        jac[:, 1, 3], jac[:, 1, 4], jac[:, 1, 5] = x, y, ones
    elif params.family == "attention":
        x, y = pts[:, 0], pts[:, 1]
        jac = np.zeros((p, 2, 3))
        jac[:, 0, 0], jac[:, 0, 1] = x, ones
        jac[:, 1, 0], jac[:, 1, 2] = y, ones
    elif params.family == "projective":
        x, y = pts[:, 0], pts[:, 1]
        w = _projective_denominator(v, x, y)
        xs = (v[0] * x + v[1] * y + v[2]) / w
        ys = (v[3] * x + v[4] * y + v[5]) / w
        jac = np.zeros((p, 2, 8))
        jac[:, 0, 0], jac[:, 0, 1], jac[:, 0, 2] = x / w, y / w, ones / w
        jac[:, 1, 3], jac[:, 1, 4], jac[:, 1, 5] = x / w, y / w, ones / w
        jac[:, 0, 6], jac[:, 0, 7] = -xs * x / w, -xs * y / w
        jac[:, 1, 6], jac[:, 1, 7] = -ys * x / w, -ys * y / w
    elif params.family == "tps":
        k = params.control_points
        basis = tps_basis(pts, k) if tps_basis_matrix is None else tps_basis_matrix
        jac = np.zeros((p, 2, 2 * k))
        jac[:, 0, :k] = basis
        jac[:, 1, k:] = basis
    else:  # affine3d
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        jac = np.zeros((p, 3, 12))
        for row in range(3):
            jac[:, row, 4 * row + 0] = x
            jac[:, row, 4 * row + 1] = y
            jac[:, row, 4 * row + 2] = z
            jac[:, row, 4 * row + 3] = ones
    return GridJacobian(jac, params.family)


def backward_theta(jac: GridJacobian, grad_coords: np.ndarray) -> np.ndarray:
    """Chain per-pixel coordinate gradients into a parameter gradient."""
    grad_coords = np.asarray(grad_coords, dtype=np.float64)
    if grad_coords.shape != jac.jac.shape[:2]:
        raise ShapeError(
            f"grad_coords shape {grad_coords.shape} does not match jacobian "
            f"{jac.jac.shape[:2]}"
        )
    return np.einsum("psj,ps->j", jac.jac, grad_coords)


# ---------------------------------------------------------------------------
# Batched fast paths (one fixed grid, many parameter vectors).
# Used by the network's transformer layer; semantics match apply_transform /
# transform_jacobian + backward_theta exactly.
# ---------------------------------------------------------------------------


def batch_apply(family: str, theta: np.ndarray, points: np.ndarray,
                tps_basis_matrix: np.ndarray | None = None) -> np.ndarray:
    """Apply B parameter vectors to one grid; returns (B, P, dim) coords."""
    theta = np.asarray(theta)
    x, y = points[:, 0], points[:, 1]
    if family == "attention":
        s, tx, ty = theta[:, 0:1], theta[:, 1:2], theta[:, 2:3]
        return np.stack([s * x[None] + tx, s * y[None] + ty], axis=2)
    if family == "affine":
        xs = theta[:, 0:1] * x[None] + theta[:, 1:2] * y[None] + theta[:, 2:3]
        ys = theta[:, 3:4] * x[None] + theta[:, 4:5] * y[None] + theta[:, 5:6]
        return np.stack([xs, ys], axis=2)
    if family == "projective":
        w = theta[:, 6:7] * x[None] + theta[:, 7:8] * y[None] + 1.0
        if np.any(np.abs(w) <= EPS_W):
            raise DegenerateTransformError(
                "homogeneous denominator vanished for at least one batch item"
            )
        xs = (theta[:, 0:1] * x[None] + theta[:, 1:2] * y[None] + theta[:, 2:3]) / w
        ys = (theta[:, 3:4] * x[None] + theta[:, 4:5] * y[None] + theta[:, 5:6]) / w
        return np.stack([xs, ys], axis=2)
    if family == "tps":
        k = theta.shape[1] // 2
        basis = tps_basis(points, k) if tps_basis_matrix is None else tps_basis_matrix
        ctrl = tps_lattice(k)
        xs = (ctrl[None, :, 0] + theta[:, :k]) @ basis.T
        ys = (ctrl[None, :, 1] + theta[:, k:]) @ basis.T
        return np.stack([xs, ys], axis=2)
    if family == "affine3d":
        z = points[:, 2]
        rows = []
        for r in range(3):
            t = theta[:, 4 * r:4 * r + 4]
            rows.append(t[:, 0:1] * x[None] + t[:, 1:2] * y[None]
                        + t[:, 2:3] * z[None] + t[:, 3:4])
        return np.stack(rows, axis=2)
    raise ShapeError(f"unknown transform family {family!r}")


def batch_theta_grad(family: str, theta: np.ndarray, points: np.ndarray,
                     grad_coords: np.ndarray,
                     tps_basis_matrix: np.ndarray | None = None) -> np.ndarray:
    """Per-item parameter gradients; grad_coords is (B, P, dim), result (B, n_params)."""
    x, y = points[:, 0], points[:, 1]
    gx, gy = grad_coords[..., 0], grad_coords[..., 1]
    if family == "attention":
        gs = gx @ x + gy @ y
        return np.stack([gs, gx.sum(axis=1), gy.sum(axis=1)], axis=1)
    if family == "affine":
        return np.stack([gx @ x, gx @ y, gx.sum(axis=1),
                         gy @ x, gy @ y, gy.sum(axis=1)], axis=1)
    if family == "projective":
        w = theta[:, 6:7] * x[None] + theta[:, 7:8] * y[None] + 1.0
        xs = (theta[:, 0:1] * x[None] + theta[:, 1:2] * y[None] + theta[:, 2:3]) / w
        ys = (theta[:, 3:4] * x[None] + theta[:, 4:5] * y[None] + theta[:, 5:6]) / w
        gxw, gyw = gx / w, gy / w
        g6 = -np.sum((gxw * xs + gyw * ys) * x[None], axis=1)
        g7 = -np.sum((gxw * xs + gyw * ys) * y[None], axis=1)
        return np.stack([gxw @ x, gxw @ y, gxw.sum(axis=1),
                         gyw @ x, gyw @ y, gyw.sum(axis=1), g6, g7], axis=1)
    if family == "tps":
        k = theta.shape[1] // 2
        basis = tps_basis(points, k) if tps_basis_matrix is None else tps_basis_matrix
        return np.concatenate([gx @ basis, gy @ basis], axis=1)
    if family == "affine3d":
        z = points[:, 2]
        gz = grad_coords[..., 2]
        cols = []
        for g in (gx, gy, gz):
            cols.extend([g @ x, g @ y, g @ z, g.sum(axis=1)])
        return np.stack(cols, axis=1)
    raise ShapeError(f"unknown transform family {family!r}")


# ---------------------------------------------------------------------------
# Constructing transforms from pixel-space maps (data synthesis, CLI warp).
# ---------------------------------------------------------------------------


def _half_extents(shape: tuple[int, int]) -> tuple[float, float]:
    h, w = shape[:2]
    if h < 2 or w < 2:
        raise ShapeError("pixel-space conversion needs sizes >= 2 on both axes")
    return (w - 1) / 2.0, (h - 1) / 2.0


def affine_from_pixel(a_px: np.ndarray, in_shape: tuple[int, int],
                      out_shape: tuple[int, int]) -> Transform:
    """Wrap a pixel-space 2x3 map (output px -> source px) as a normalized affine."""
    a_px = np.asarray(a_px, dtype=np.float64).reshape(2, 3)
    hx_o, hy_o = _half_extents(out_shape)
    hx_i, hy_i = _half_extents(in_shape)
    # px_out = (n + 1) * h_out per axis; x_norm_in = src_px / h_in - 1
    a = np.empty(6)
    a[0] = a_px[0, 0] * hx_o / hx_i
    a[1] = a_px[0, 1] * hy_o / hx_i
    a[2] = (a_px[0, 0] * hx_o + a_px[0, 1] * hy_o + a_px[0, 2]) / hx_i - 1.0
    a[3] = a_px[1, 0] * hx_o / hy_i
    a[4] = a_px[1, 1] * hy_o / hy_i
    a[5] = (a_px[1, 0] * hx_o + a_px[1, 1] * hy_o + a_px[1, 2]) / hy_i - 1.0
    return Transform("affine", a)


def projective_from_pixel(h_px: np.ndarray, in_shape: tuple[int, int],
                          out_shape: tuple[int, int]) -> Transform:
    """Wrap a pixel-space 3x3 homography (output px -> source px) as normalized."""
    h_px = np.asarray(h_px, dtype=np.float64).reshape(3, 3)
    hx_o, hy_o = _half_extents(out_shape)
    hx_i, hy_i = _half_extents(in_shape)
    s_out = np.array([[hx_o, 0.0, hx_o], [0.0, hy_o, hy_o], [0.0, 0.0, 1.0]])
    s_in_inv = np.array([[1.0 / hx_i, 0.0, -1.0], [0.0, 1.0 / hy_i, -1.0], [0.0, 0.0, 1.0]])
    h = s_in_inv @ h_px @ s_out
    if abs(h[2, 2]) <= EPS_W:
        raise DegenerateTransformError("homography cannot be normalized (h33 ~ 0)")
    h = h / h[2, 2]
    return Transform("projective", h.reshape(-1)[:8])


def fit_homography(src_pts: np.ndarray, dst_pts: np.ndarray) -> np.ndarray:
    """3x3 map sending each src point to its dst point (4+ correspondences, DLT)."""
    src = np.asarray(src_pts, dtype=np.float64)
    dst = np.asarray(dst_pts, dtype=np.float64)
    if src.shape != dst.shape or src.shape[0] < 4 or src.shape[1] != 2:
        raise ShapeError("need matching (N>=4, 2) point arrays")
    rows = []
    rhs = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    sol, *_ = np.linalg.lstsq(np.asarray(rows), np.asarray(rhs), rcond=None)
    return np.concatenate([sol, [1.0]]).reshape(3, 3)
