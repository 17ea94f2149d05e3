"""Model builders for the digit experiments.

All classifier stacks share fixed recipes; only hidden widths vary, chosen by
a grid search so every model in an experiment lands on the same parameter
budget (within 5%). Regression layers of localisation sub-networks start at
zero weights with an identity-transform bias, making every spatial
transformer a no-op at initialisation.
"""

from __future__ import annotations

import numpy as np

from .. import gridgen as gg
from ..tensor import Rng
from .layers import (AvgPool, Concat, Conv2D, DepthFlatten, FullyConnected,
                     MaxPool, Model, ReLU, SpatialTransformer)


class ConfigError(ValueError):
    """Invalid model/experiment configuration."""


# dataset kind -> (input shape, classes, avg-pool after the spatial transformer)
DATASETS = {
    "plain": ((28, 28, 1), 10, False),
    "R": ((28, 28, 1), 10, False),
    "P": ((28, 28, 1), 10, False),
    "E": ((28, 28, 1), 10, False),
    "RTS": ((42, 42, 1), 10, True),
    "TC": ((60, 60, 1), 10, True),
    "addition": ((42, 42, 2), 19, False),
    "extruded3d": ((60, 60, 60, 1), 10, False),
}

MODEL_KINDS = ("FCN", "CNN", "ST-FCN", "ST-CNN", "2xST-FCN", "3D-ST-CNN")

DEFAULT_FCN_WIDTHS = (128, 256)
DEFAULT_CNN_FILTERS = (32, 64)
BUDGET_TOLERANCE = 0.05


def normalize_kind(kind: str) -> str:
    k = kind.replace("×", "x").lower()
    for known in MODEL_KINDS:
        if k == known.lower():
            return known
    raise ConfigError(f"unknown model kind {kind!r} (expected one of {MODEL_KINDS})")


def _fcn_stack(in_shape, classes, width, rng, dtype):
    in_features = int(np.prod(in_shape))
    return [
        FullyConnected(in_features, width, rng, dtype, name="fc1"),
        ReLU("relu1"),
        FullyConnected(width, width, rng, dtype, name="fc2"),
        ReLU("relu2"),
        FullyConnected(width, classes, rng, dtype, name="classifier"),
    ]


def _cnn_stack(in_shape, classes, filters, rng, dtype):
    h, w, c = in_shape
    layers = [
        Conv2D(c, filters, 9, rng=rng, dtype=dtype, name="conv1"),
        ReLU("relu1"),
        MaxPool(2, name="pool1"),
        Conv2D(filters, filters, 7, rng=rng, dtype=dtype, name="conv2"),
        ReLU("relu2"),
        MaxPool(2, name="pool2"),
    ]
    shape = in_shape
    for layer in layers:
        shape = layer.output_shape(shape)
    layers.append(FullyConnected(int(np.prod(shape)), classes, rng, dtype,
                                 name="classifier"))
    return layers


def _regression_layer(in_features, family, control_points, dtype):
    ident = gg.identity_transform(family, control_points).values
    return FullyConnected(in_features, ident.size, rng=None, dtype=dtype,
                          init="zero", bias_init=ident, name="regress")


def _locnet_fc(in_shape, family, control_points, rng, dtype):
    in_features = int(np.prod(in_shape))
    layers = [
        FullyConnected(in_features, 32, rng, dtype, name="loc_fc1"), ReLU(),
        FullyConnected(32, 32, rng, dtype, name="loc_fc2"), ReLU(),
        FullyConnected(32, 32, rng, dtype, name="loc_fc3"), ReLU(),
        _regression_layer(32, family, control_points, dtype),
    ]
    return Model(layers, name="locnet")


def _locnet_conv(in_shape, family, control_points, rng, dtype):
    layers = [
        AvgPool(2, name="loc_down"),
        Conv2D(in_shape[-1], 20, 5, rng=rng, dtype=dtype, name="loc_conv1"),
        ReLU(),
        MaxPool(2, name="loc_pool"),
        Conv2D(20, 20, 5, rng=rng, dtype=dtype, name="loc_conv2"),
        ReLU(),
    ]
    shape = in_shape
    for layer in layers:
        shape = layer.output_shape(shape)
    layers += [
        FullyConnected(int(np.prod(shape)), 20, rng, dtype, name="loc_fc"),
        ReLU(),
        _regression_layer(20, family, control_points, dtype),
    ]
    return Model(layers, name="locnet")


def _locnet_3d(in_shape, rng, dtype):
    # no recipe is given for the volumetric case; a cheap projection-based
    # regressor is enough to steer the 3D transform
    layers = [DepthFlatten(), AvgPool(4, name="loc_down")]
    shape = in_shape
    for layer in layers:
        shape = layer.output_shape(shape)
    layers += [
        FullyConnected(int(np.prod(shape)), 32, rng, dtype, name="loc_fc1"), ReLU(),
        FullyConnected(32, 32, rng, dtype, name="loc_fc2"), ReLU(),
        _regression_layer(32, "affine3d", gg.DEFAULT_TPS_POINTS, dtype),
    ]
    return Model(layers, name="locnet")


def _assemble(kind, dataset_kind, family, width, rng, dtype, control_points):
    if dataset_kind not in DATASETS:
        raise ConfigError(f"unknown dataset kind {dataset_kind!r}")
    in_shape, classes, st_pool = DATASETS[dataset_kind]
    spatial = in_shape[:-1]

    def st(locnet_builder, name):
        locnet = locnet_builder(in_shape, family, control_points, rng, dtype)
        return SpatialTransformer(family, locnet, spatial,
                                  control_points=control_points, name=name)

    if kind == "FCN":
        return Model(_fcn_stack(in_shape, classes, width, rng, dtype), name="fcn")
    if kind == "CNN":
        return Model(_cnn_stack(in_shape, classes, width, rng, dtype), name="cnn")
    if kind in ("ST-FCN", "ST-CNN", "2xST-FCN") and family is None:
        raise ConfigError(f"{kind} requires a transform family")

    if kind == "ST-FCN":
        layers = [st(_locnet_fc, "st")]
        shape = layers[0].output_shape(in_shape)
        if st_pool:
            layers.append(AvgPool(2, name="st_down"))
            shape = layers[-1].output_shape(shape)
        return Model(layers + _fcn_stack(shape, classes, width, rng, dtype), name="st_fcn")

    if kind == "ST-CNN":
        layers = [st(_locnet_conv, "st")]
        shape = layers[0].output_shape(in_shape)
        if st_pool:
            pooled = tuple(d // 2 for d in shape[:-1])
            # the fixed 9x9/7x7 classifier stack needs >= 22 px after pooling
            if min(pooled) >= 22:
                layers.append(AvgPool(2, name="st_down"))
                shape = layers[-1].output_shape(shape)
        return Model(layers + _cnn_stack(shape, classes, width, rng, dtype), name="st_cnn")

    if kind == "2xST-FCN":
        branches = [st(_locnet_fc, "st_a"), st(_locnet_fc, "st_b")]
        concat = Concat(branches, name="st_pair")
        shape = concat.output_shape(in_shape)
        layers = [concat]
        if st_pool:
            layers.append(AvgPool(2, name="st_down"))
            shape = layers[-1].output_shape(shape)
        return Model(layers + _fcn_stack(shape, classes, width, rng, dtype),
                     name="st2_fcn")

    if kind == "3D-ST-CNN":
        locnet = _locnet_3d(in_shape, rng, dtype)
        st3 = SpatialTransformer("affine3d", locnet, spatial, name="st3d")
        flat = DepthFlatten(name="project")
        shape = flat.output_shape(st3.output_shape(in_shape))
        return Model([st3, flat] + _cnn_stack(shape, classes, width, rng, dtype),
                     name="st3d_cnn")

    raise ConfigError(f"unknown model kind {kind!r}")


def _count_params(kind, dataset_kind, family, width, control_points) -> int:
    model = _assemble(kind, dataset_kind, family, width, _ZeroRng(), np.float32,
                      control_points)
    return model.parameter_count


class _ZeroRng:
    """Stand-in generator for count-only model assembly."""

    def uniform_array(self, n, lo=0.0, hi=1.0):
        return np.zeros(n)


def solve_width(kind: str, dataset_kind: str, family: str | None,
                budget: int | None, width_range: tuple[int, int],
                control_points: int = gg.DEFAULT_TPS_POINTS) -> int:
    """Smallest width whose parameter count lands within 5% of the budget."""
    lo, hi = width_range
    if budget is None:
        return lo
    counts = {w: _count_params(kind, dataset_kind, family, w, control_points)
              for w in range(lo, hi + 1)}
    best = min(counts, key=lambda w: (abs(counts[w] - budget), w))
    if abs(counts[best] - budget) > BUDGET_TOLERANCE * budget:
        raise ConfigError(
            f"{kind} on {dataset_kind}: budget {budget} unattainable; achievable "
            f"parameter range is [{min(counts.values())}, {max(counts.values())}] "
            f"for widths {lo}..{hi}"
        )
    return best


def build_model(kind: str, dataset_kind: str, family: str | None = None,
                budget: int | None = None, width: int | None = None,
                seed: int = 0, dtype=np.float32,
                fcn_widths: tuple[int, int] = DEFAULT_FCN_WIDTHS,
                cnn_filters: tuple[int, int] = DEFAULT_CNN_FILTERS,
                control_points: int = gg.DEFAULT_TPS_POINTS) -> Model:
    """Construct one of the experiment models.

    `budget` drives the hidden-width grid search; passing `width` pins it
    directly (used when reloading checkpoints). Weights are seeded; spatial
    transformer regression layers always start at the identity transform.
    """
    kind = normalize_kind(kind)
    if width is None:
        width_range = cnn_filters if "CNN" in kind else fcn_widths
        width = solve_width(kind, dataset_kind, family, budget, width_range,
                            control_points)
    model = _assemble(kind, dataset_kind, family, width, Rng(seed), dtype,
                      control_points)
    model.spec = {
        "kind": kind, "dataset_kind": dataset_kind, "family": family,
        "width": int(width), "seed": int(seed), "control_points": int(control_points),
    }
    return model
