"""Adjustable bounded rectifier with learnable per-channel slopes.

Forward: f(y) = min(max(k*y + 0.5, 0), 1). In step mode the rectifier is
replaced by a hard step 1[k*y > 0]. Slopes can be absorbed into the
preceding affine layer without changing the network function, and any
ReLU network can be cast to bounded-rectifier form on a calibrated
input range.
"""

import copy

import numpy as np

from .tensor import Parameter, Tensor, ShapeError, _accum

LINEAR = "linear"
STEP = "step"


class TransformError(ValueError):
    """A network rewrite's structural precondition failed."""


class DegenerateLayerError(ValueError):
    """A calibration bound came out zero; the layer carries no signal."""


def _expand(slopes, ndim):
    """Broadcast slope vector along the channel axis (axis 1)."""
    shape = [1] * ndim
    shape[1] = -1
    return slopes.reshape(shape)


def bounded_forward(y, slopes):
    """f(y) = clip(k*y + 0.5, 0, 1), k broadcast along axis 1."""
    k = _expand(slopes, y.ndim)
    return np.clip(k * y + 0.5, 0.0, 1.0)


def bounded_backward(y, slopes, upstream):
    """Gradients of the bounded rectifier.

    The indicator is strict (0 < k*y+0.5 < 1): units pinned exactly at a
    clip boundary pass no gradient. Slope gradient sums over every unit
    sharing the slope (all axes except the channel axis).
    """
    k = _expand(slopes, y.ndim)
    f = k * y + 0.5
    inside = (f > 0.0) & (f < 1.0)
    grad_y = upstream * k * inside
    axes = tuple(ax for ax in range(y.ndim) if ax != 1)
    grad_k = (upstream * y * inside).sum(axis=axes)
    return grad_y, grad_k


def step_forward(y, slopes):
    """1 if k*y > 0 else 0; a negative slope flips the step."""
    k = _expand(slopes, y.ndim)
    return (k * y > 0.0).astype(np.float64)


class BoundedRectifier:
    """Activation layer with one slope per channel (per unit for 2-d inputs)."""

    def __init__(self, channels, name="act", mode=LINEAR):
        self.slopes = Parameter(np.ones(channels), name=f"{name}.slopes")
        self.name = name
        self.mode = mode

    @property
    def channels(self):
        return self.slopes.data.shape[0]

    def __call__(self, x):
        if x.data.shape[1] != self.channels:
            raise ShapeError(
                f"{self.name}: {self.channels} slopes for {x.data.shape[1]} channels")
        if self.mode == STEP:
            # Hard step: constant w.r.t. autograd, used at inference only.
            return Tensor(step_forward(x.data, self.slopes.data))
        y = x.data
        slopes = self.slopes
        out = Tensor(bounded_forward(y, slopes.data),
                     requires_grad=x.requires_grad or slopes.requires_grad,
                     _parents=(x, slopes))
        def back(g):
            gy, gk = bounded_backward(y, slopes.data, g)
            _accum(x, gy)
            _accum(slopes, gk)
        out._backward = back
        return out


def absorb_slopes(net):
    """Fold each rectifier's slopes into the preceding affine layer.

    W <- k*W (per output channel), b <- k*b, slopes <- 1. The network
    function is unchanged. Returns a transformed copy.
    """
    net = copy.deepcopy(net)
    for idx, layer in enumerate(net.layers):
        if not isinstance(layer, BoundedRectifier):
            continue
        if idx == 0 or not hasattr(net.layers[idx - 1], "weight"):
            raise TransformError(
                f"{layer.name}: no affine layer immediately before it")
        affine = net.layers[idx - 1]
        k = layer.slopes.data
        w = affine.weight.data
        affine.weight.data = w * k.reshape((-1,) + (1,) * (w.ndim - 1))
        affine.bias.data = affine.bias.data * k
        layer.slopes.data = np.ones_like(k)
    return net


# Layers transparent to positive per-channel rescaling of their input.
_SCALE_TRANSPARENT = ("MaxPool", "Flatten")


def cast_relu_net(relu_net, calibration_data):
    """Rewrite a ReLU network into an equivalent bounded-rectifier network.

    Per ReLU layer, M = max|pre-activation| over the calibration data. The
    preceding bias is shifted by -0.5*M so the rectifier's zero-knee sits
    where ReLU's does, the slope is 1/M, and the next affine layer is
    scaled by M to restore magnitudes. Outputs match the source network on
    inputs within the calibration range; outside it the clip at 1 bites.
    """
    from .network import Network  # local import: network builds on this module

    layers = relu_net.layers
    # Bound each ReLU's pre-activation on the original network.
    pre_acts = relu_net.collect_preactivations(calibration_data)
    bounds = {}
    for idx, layer in enumerate(layers):
        if type(layer).__name__ == "ReLULayer":
            m = float(np.max(np.abs(pre_acts[idx])))
            if m == 0.0:
                raise DegenerateLayerError(f"layer {idx}: calibration bound is zero")
            bounds[idx] = m

    new_layers = []
    carry = 1.0  # scale owed to the next affine layer
    for idx, layer in enumerate(layers):
        name = type(layer).__name__
        if name == "ReLULayer":
            m = bounds[idx]
            if not new_layers or not hasattr(new_layers[-1], "bias"):
                raise TransformError(f"ReLU at {idx} has no affine layer before it")
            new_layers[-1].bias.data = new_layers[-1].bias.data - 0.5 * m
            channels = new_layers[-1].bias.data.shape[0]
            rect = BoundedRectifier(channels, name=f"cast{idx}")
            rect.slopes.data = np.full(channels, 1.0 / m)
            new_layers.append(rect)
            carry = m
        elif hasattr(layer, "weight"):
            dup = copy.deepcopy(layer)
            dup.weight.data = dup.weight.data * carry
            carry = 1.0
            new_layers.append(dup)
        elif name in _SCALE_TRANSPARENT:
            new_layers.append(copy.deepcopy(layer))
        else:
            raise TransformError(f"cannot cast layer of type {name}")
    if carry != 1.0:
        raise TransformError("network ends in a ReLU; no affine layer to rescale")
    return Network(new_layers)
