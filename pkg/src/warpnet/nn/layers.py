"""Reverse-mode layer stack.

Layers operate on batched row-major arrays: (B, H, W, C), (B, H, W, D, C),
or (B, features) once flattened. Each layer caches exactly what its backward
pass needs during forward; backward returns the input gradient and fills the
layer's parameter gradient buffers (overwriting, one backward per forward).
"""

from __future__ import annotations

import numpy as np

from .. import gridgen as gg
from .. import sampler as sp
from ..tensor import ShapeError


class StateError(RuntimeError):
    """Backward called without a matching forward."""


class Param:
    """A tensor with its gradient buffer; `name` is local to the owning layer."""

    def __init__(self, name: str, value: np.ndarray, locnet: bool = False):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.locnet = locnet  # scaled learning rate during SGD

    @property
    def size(self) -> int:
        return self.value.size

    def cast(self, dtype) -> None:
        self.value = self.value.astype(dtype)
        self.grad = np.zeros_like(self.value)


def glorot_uniform(rng, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform_array(int(np.prod(shape)), -bound, bound).reshape(shape).astype(dtype)


class Layer:
    name = "layer"

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[Param]:
        return []

    def named_params(self, prefix: str) -> list[tuple[str, Param]]:
        """(qualified name, param) pairs; nested layers extend the prefix."""
        return [(f"{prefix}.{p.name}", p) for p in self.params()]

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def _need(self, attr: str):
        value = getattr(self, attr, None)
        if value is None:
            raise StateError(f"{self.name}: backward called before forward")
        return value


class FullyConnected(Layer):
    def __init__(self, in_features: int, out_features: int, rng=None, dtype=np.float32,
                 init: str = "glorot", bias_init: np.ndarray | None = None,
                 name: str = "fc"):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        if init == "glorot":
            w = glorot_uniform(rng, in_features, out_features,
                               (in_features, out_features), dtype)
        elif init == "zero":
            w = np.zeros((in_features, out_features), dtype=dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        b = np.zeros(out_features, dtype=dtype)
        if bias_init is not None:
            b = np.asarray(bias_init, dtype=dtype).copy()
        self.w = Param("w", w)
        self.b = Param("b", b)
        self._x2 = None
        self._in_shape = None

    def forward(self, x):
        b = x.shape[0]
        x2 = x.reshape(b, -1)
        if x2.shape[1] != self.in_features:
            raise ShapeError(
                f"{self.name}: expected {self.in_features} input features, "
                f"got {x2.shape[1]} from shape {x.shape}"
            )
        self._x2, self._in_shape = x2, x.shape
        return x2 @ self.w.value + self.b.value

    def backward(self, grad):
        x2 = self._need("_x2")
        self.w.grad = x2.T @ grad
        self.b.grad = grad.sum(axis=0)
        return (grad @ self.w.value.T).reshape(self._in_shape)

    def params(self):
        return [self.w, self.b]

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.in_features:
            raise ShapeError(f"{self.name}: input shape {in_shape} has "
                             f"{int(np.prod(in_shape))} features, expected {self.in_features}")
        return (self.out_features,)


class Conv2D(Layer):
    def __init__(self, in_channels: int, filters: int, size: int, stride: int = 1,
                 pad: int = 0, rng=None, dtype=np.float32, name: str = "conv"):
        self.name = name
        self.in_channels = in_channels
        self.filters = filters
        self.size = size
        self.stride = stride
        self.pad = pad
        fan_in = size * size * in_channels
        self.w = Param("w", glorot_uniform(rng, fan_in, filters,
                                           (size, size, in_channels, filters), dtype))
        self.b = Param("b", np.zeros(filters, dtype=dtype))
        self._cols = None
        self._x_shape = None

    def _out_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.size, self.stride, self.pad
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self.name}: kernel {k} does not fit input {h}x{w}")
        return oh, ow

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeError(f"{self.name}: expected (B,H,W,{self.in_channels}), got {x.shape}")
        b, h, w, _ = x.shape
        k, s, p = self.size, self.stride, self.pad
        if p:
            x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        oh, ow = self._out_hw(h, w)
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
        win = win[:, ::s, ::s]  # (B, oh, ow, C, k, k)
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
            b * oh * ow, k * k * self.in_channels)
        out = cols @ self.w.value.reshape(-1, self.filters) + self.b.value
        self._cols, self._x_shape = cols, (b, h, w)
        return out.reshape(b, oh, ow, self.filters)

    def backward(self, grad):
        cols = self._need("_cols")
        b, h, w = self._x_shape
        k, s, p = self.size, self.stride, self.pad
        oh, ow = self._out_hw(h, w)
        gflat = grad.reshape(b * oh * ow, self.filters)
        self.w.grad = (cols.T @ gflat).reshape(self.w.value.shape)
        self.b.grad = gflat.sum(axis=0)
        dcols = (gflat @ self.w.value.reshape(-1, self.filters).T).reshape(
            b, oh, ow, k, k, self.in_channels)
        dxp = np.zeros((b, h + 2 * p, w + 2 * p, self.in_channels), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * oh:s, j:j + s * ow:s, :] += dcols[:, :, :, i, j, :]
        return dxp[:, p:p + h, p:p + w, :] if p else dxp

    def params(self):
        return [self.w, self.b]

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.in_channels:
            raise ShapeError(f"{self.name}: expected (H,W,{self.in_channels}), got {in_shape}")
        oh, ow = self._out_hw(in_shape[0], in_shape[1])
        return (oh, ow, self.filters)


class MaxPool(Layer):
    """s x s max pooling with stride s; trailing rows/cols that do not fill a
    window are dropped."""

    def __init__(self, size: int = 2, name: str = "maxpool"):
        self.name = name
        self.size = size
        self._argmax = None
        self._x_shape = None

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected (B,H,W,C), got {x.shape}")
        s = self.size
        b, h, w, c = x.shape
        oh, ow = h // s, w // s
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self.name}: window {s} does not fit input {h}x{w}")
        xc = x[:, :oh * s, :ow * s, :]
        win = xc.reshape(b, oh, s, ow, s, c).transpose(0, 1, 3, 5, 2, 4).reshape(
            b, oh, ow, c, s * s)
        self._argmax = np.argmax(win, axis=4)
        self._x_shape = x.shape
        return np.take_along_axis(win, self._argmax[..., None], axis=4)[..., 0]

    def backward(self, grad):
        arg = self._need("_argmax")
        b, h, w, c = self._x_shape
        s = self.size
        oh, ow = h // s, w // s
        win = np.zeros((b, oh, ow, c, s * s), dtype=grad.dtype)
        np.put_along_axis(win, arg[..., None], grad[..., None], axis=4)
        dx = np.zeros(self._x_shape, dtype=grad.dtype)
        dx[:, :oh * s, :ow * s, :] = win.reshape(b, oh, ow, c, s, s).transpose(
            0, 1, 4, 2, 5, 3).reshape(b, oh * s, ow * s, c)
        return dx

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"{self.name}: expected (H,W,C), got {in_shape}")
        oh, ow = in_shape[0] // self.size, in_shape[1] // self.size
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self.name}: window {self.size} does not fit {in_shape}")
        return (oh, ow, in_shape[2])


class AvgPool(Layer):
    """s-fold average pooling over all spatial axes (2D maps or 3D volumes)."""

    def __init__(self, size: int = 2, name: str = "avgpool"):
        self.name = name
        self.size = size
        self._x_shape = None

    def forward(self, x):
        if x.ndim not in (4, 5):
            raise ShapeError(f"{self.name}: expected rank 4 or 5 input, got {x.shape}")
        s = self.size
        spatial = x.shape[1:-1]
        out_sp = tuple(d // s for d in spatial)
        if any(d < 1 for d in out_sp):
            raise ShapeError(f"{self.name}: window {s} does not fit input {x.shape}")
        b, c = x.shape[0], x.shape[-1]
        self._x_shape = x.shape
        if x.ndim == 4:
            xc = x[:, :out_sp[0] * s, :out_sp[1] * s, :]
            win = xc.reshape(b, out_sp[0], s, out_sp[1], s, c)
            return win.mean(axis=(2, 4))
        xc = x[:, :out_sp[0] * s, :out_sp[1] * s, :out_sp[2] * s, :]
        win = xc.reshape(b, out_sp[0], s, out_sp[1], s, out_sp[2], s, c)
        return win.mean(axis=(2, 4, 6))

    def backward(self, grad):
        shape = self._need("_x_shape")
        s = self.size
        dx = np.zeros(shape, dtype=grad.dtype)
        share = grad / float(s ** (len(shape) - 2))
        if len(shape) == 4:
            oh, ow = grad.shape[1:3]
            dx[:, :oh * s, :ow * s, :] = np.repeat(np.repeat(share, s, axis=1), s, axis=2)
        else:
            oh, ow, od = grad.shape[1:4]
            up = np.repeat(np.repeat(np.repeat(share, s, axis=1), s, axis=2), s, axis=3)
            dx[:, :oh * s, :ow * s, :od * s, :] = up
        return dx

    def output_shape(self, in_shape):
        out_sp = tuple(d // self.size for d in in_shape[:-1])
        if any(d < 1 for d in out_sp):
            raise ShapeError(f"{self.name}: window {self.size} does not fit {in_shape}")
        return out_sp + (in_shape[-1],)


class ReLU(Layer):
    def __init__(self, name: str = "relu"):
        self.name = name
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._need("_mask")

    def output_shape(self, in_shape):
        return in_shape


class DepthFlatten(Layer):
    """Project a volume to 2D by summing over the depth axis."""

    def __init__(self, name: str = "depthflatten"):
        self.name = name
        self._depth = None

    def forward(self, x):
        if x.ndim != 5:
            raise ShapeError(f"{self.name}: expected (B,H,W,D,C), got {x.shape}")
        self._depth = x.shape[3]
        return x.sum(axis=3)

    def backward(self, grad):
        d = self._need("_depth")
        return np.repeat(grad[:, :, :, None, :], d, axis=3)

    def output_shape(self, in_shape):
        if len(in_shape) != 4:
            raise ShapeError(f"{self.name}: expected (H,W,D,C), got {in_shape}")
        return (in_shape[0], in_shape[1], in_shape[3])


class SpatialTransformer(Layer):
    """Locnet -> grid generation -> sampling, end to end differentiable.

    The localisation sub-model regresses transform parameters from the input;
    the fixed output grid is mapped through the predicted transform and the
    input is resampled there. Gradients reach the sub-model through the
    sampling-coordinate derivatives and the transform Jacobian, and also pass
    straight through to the layer input via the sampling weights.
    """

    def __init__(self, family: str, locnet: "Model", out_shape: tuple[int, ...],
                 control_points: int = gg.DEFAULT_TPS_POINTS, name: str = "st"):
        self.name = name
        self.family = family
        self.locnet = locnet
        self.out_shape = tuple(out_shape)
        self.control_points = control_points
        self.kernel = sp.TRILINEAR if family == "affine3d" else sp.BILINEAR
        grid = gg.regular_grid(self.out_shape)
        self.grid_points = grid.points
        self.basis = gg.tps_basis(grid.points, control_points) if family == "tps" else None
        self.n_params = gg.identity_transform(family, control_points).values.size
        for p in self.locnet.params():
            p.locnet = True
        self._theta = None
        self._saved = None

    @property
    def last_theta(self) -> np.ndarray:
        """Parameters used by the most recent forward (also feedable downstream)."""
        return self._need("_theta").copy()

    def forward(self, x):
        theta = self.locnet.forward(x)
        if theta.ndim != 2 or theta.shape[1] != self.n_params:
            raise ShapeError(
                f"{self.name}: locnet produced {theta.shape}, expected "
                f"(B, {self.n_params}) for family {self.family}"
            )
        coords = gg.batch_apply(self.family, theta.astype(np.float64),
                                self.grid_points, self.basis)
        saved = sp.batch_sample(x, coords, self.kernel)
        self._theta, self._saved = theta, saved
        b, c = x.shape[0], x.shape[-1]
        return saved.out.reshape((b,) + self.out_shape + (c,))

    def backward(self, grad):
        saved = self._need("_saved")
        theta = self._theta
        b, c = saved.u.shape[0], saved.u.shape[-1]
        g = grad.reshape(b, -1, c)
        dx_sampling = sp.batch_backward_input(saved, g)
        dcoords = sp.batch_backward_grid(saved, g)
        dtheta = gg.batch_theta_grad(self.family, theta.astype(np.float64),
                                     self.grid_points, dcoords, self.basis)
        dx_locnet = self.locnet.backward(dtheta.astype(theta.dtype))
        return dx_sampling + dx_locnet

    def params(self):
        return self.locnet.params()

    def named_params(self, prefix):
        return self.locnet.named_params(f"{prefix}.locnet")

    def output_shape(self, in_shape):
        want_rank = 4 if self.family == "affine3d" else 3
        if len(in_shape) != want_rank:
            raise ShapeError(f"{self.name}: family {self.family} expects rank "
                             f"{want_rank} maps, got {in_shape}")
        self.locnet.output_shape(in_shape)  # validates the sub-model wiring
        return self.out_shape + (in_shape[-1],)


class Concat(Layer):
    """Run branches on the same input and concatenate outputs channel-wise."""

    def __init__(self, branches: list, name: str = "concat"):
        self.name = name
        self.branches = list(branches)
        self._splits = None

    def forward(self, x):
        outs = [br.forward(x) for br in self.branches]
        first = outs[0].shape[:-1]
        for o in outs[1:]:
            if o.shape[:-1] != first:
                raise ShapeError(f"{self.name}: branch output shapes disagree")
        self._splits = [o.shape[-1] for o in outs]
        return np.concatenate(outs, axis=-1)

    def backward(self, grad):
        splits = self._need("_splits")
        edges = np.cumsum(splits)[:-1]
        parts = np.split(grad, edges, axis=-1)
        dx = None
        for br, g in zip(self.branches, parts):
            gi = br.backward(np.ascontiguousarray(g))
            dx = gi if dx is None else dx + gi
        return dx

    def params(self):
        out = []
        for br in self.branches:
            out.extend(br.params())
        return out

    def named_params(self, prefix):
        out = []
        for i, br in enumerate(self.branches):
            out.extend(br.named_params(f"{prefix}.branch{i}"))
        return out

    def output_shape(self, in_shape):
        shapes = [br.output_shape(in_shape) for br in self.branches]
        for s in shapes[1:]:
            if s[:-1] != shapes[0][:-1]:
                raise ShapeError(f"{self.name}: branch output shapes disagree")
        return shapes[0][:-1] + (sum(s[-1] for s in shapes),)


class Model(Layer):
    """An ordered stack of layers; itself usable as a layer (sub-models)."""

    def __init__(self, layers: list, name: str = "model"):
        self.name = name
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def named_params(self, prefix=""):
        out = []
        for i, layer in enumerate(self.layers):
            tag = f"{i}_{type(layer).__name__.lower()}"
            out.extend(layer.named_params(f"{prefix}.{tag}" if prefix else tag))
        return out

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params())

    def output_shape(self, in_shape):
        for layer in self.layers:
            in_shape = layer.output_shape(in_shape)
        return in_shape

    def cast(self, dtype) -> "Model":
        for p in self.params():
            p.cast(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        named = {}
        for name, p in self.named_params():
            if name in named:
                raise ValueError(f"duplicate parameter name {name}")
            named[name] = p.value
        return named

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_params())
        if set(own) != set(state):
            missing = set(own) ^ set(state)
            raise ValueError(f"parameter names do not match checkpoint: {sorted(missing)}")
        for name, p in own.items():
            arr = state[name]
            if arr.shape != p.value.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.value.shape}")
            p.value = arr.astype(p.value.dtype)
            p.grad = np.zeros_like(p.value)
