"""Layer graph: conv / dense / pooling / activation stacks and presets."""

import numpy as np

from . import tensor as T
from .activation import BoundedRectifier, LINEAR, STEP
from .tensor import Parameter, Tensor


class Conv2D:
    def __init__(self, c_in, c_out, kernel, stride=1, pad=0, name="conv"):
        self.weight = Parameter(np.zeros((c_out, c_in, kernel, kernel)), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), name=f"{name}.bias")
        self.stride = stride
        self.pad = pad
        self.name = name

    def __call__(self, x):
        return T.conv2d_forward(x, self.weight, self.bias, self.stride, self.pad)

    def fan(self):
        c_out, c_in, kh, kw = self.weight.data.shape
        return c_in * kh * kw, c_out * kh * kw


class Dense:
    def __init__(self, n_in, n_out, name="fc"):
        self.weight = Parameter(np.zeros((n_out, n_in)), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out), name=f"{name}.bias")
        self.name = name

    def __call__(self, x):
        return T.fc_forward(x, self.weight, self.bias)

    def fan(self):
        n_out, n_in = self.weight.data.shape
        return n_in, n_out


class MaxPool:
    def __init__(self, window, stride=None, name="pool"):
        self.window = window
        self.stride = stride or window
        self.name = name

    def __call__(self, x):
        return T.maxpool_forward(x, self.window, self.stride)


class Flatten:
    def __init__(self, name="flatten"):
        self.name = name

    def __call__(self, x):
        return T.flatten(x)


class ReLULayer:
    def __init__(self, name="relu"):
        self.name = name

    def __call__(self, x):
        return T.relu(x)


class Network:
    """Ordered layer stack; forward rebuilds the autograd graph each call."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, capture=False):
        out = x if isinstance(x, Tensor) else Tensor(x)
        captured = {}
        for layer in self.layers:
            out = layer(out)
            if capture and isinstance(layer, BoundedRectifier):
                captured[layer.name] = out.data
        return (out, captured) if capture else out

    def collect_preactivations(self, x):
        """Inputs seen by each layer, keyed by layer index."""
        out = x if isinstance(x, Tensor) else Tensor(x)
        pre = {}
        for idx, layer in enumerate(self.layers):
            pre[idx] = out.data
            out = layer(out)
        return pre

    def parameters(self):
        params = []
        for layer in self.layers:
            for attr in ("weight", "bias"):
                if hasattr(layer, attr):
                    params.append(getattr(layer, attr))
            if isinstance(layer, BoundedRectifier):
                params.append(layer.slopes)
        return params

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def rectifiers(self):
        return [l for l in self.layers if isinstance(l, BoundedRectifier)]

    def affine_layers(self):
        return [l for l in self.layers if isinstance(l, (Conv2D, Dense))]

    def head(self):
        return self.affine_layers()[-1]

    def set_mode(self, mode):
        assert mode in (LINEAR, STEP)
        for r in self.rectifiers():
            r.mode = mode

    def predict(self, images, batch_size=256):
        preds = []
        for i in range(0, len(images), batch_size):
            logits = self.forward(images[i:i + batch_size])
            preds.append(logits.data.argmax(axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def accuracy(self, images, labels, batch_size=256):
        return float(np.mean(self.predict(images, batch_size) == labels))


def xavier_init(net, seed=0):
    """Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases, unit slopes."""
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        if isinstance(layer, (Conv2D, Dense)):
            fan_in, fan_out = layer.fan()
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            layer.weight.data = rng.uniform(-bound, bound, size=layer.weight.data.shape)
            layer.bias.data = np.zeros_like(layer.bias.data)
        elif isinstance(layer, BoundedRectifier):
            layer.slopes.data = np.ones_like(layer.slopes.data)
    return net


def _act(channels, name, bounded):
    return BoundedRectifier(channels, name=name) if bounded else ReLULayer(name=name)


def _parse_mask(mask, n_acts):
    """'all', 'last', 'none', or a 0/1 string per activation layer."""
    if mask == "all":
        return [True] * n_acts
    if mask == "last":
        return [False] * (n_acts - 1) + [True]
    if mask == "none":
        return [False] * n_acts
    if len(mask) != n_acts or set(mask) - {"0", "1"}:
        raise ValueError(f"binarize mask {mask!r}: expected 'all', 'last', 'none' "
                         f"or {n_acts} chars of 0/1")
    return [ch == "1" for ch in mask]


def build_preset(preset, width_mult=1.0, binarize="last"):
    """Named architectures. `binarize` picks which activations are bounded
    rectifiers (the rest stay ReLU)."""
    w = lambda n: max(1, int(round(n * width_mult)))
    if preset == "lenet-small":
        c1, c2, f1 = w(8), w(16), w(128)
        flags = _parse_mask(binarize, 3)
        layers = [
            Conv2D(1, c1, 5, name="conv1"),          # 28 -> 24
            _act(c1, "act1", flags[0]),
            MaxPool(2, name="pool1"),                # 24 -> 12
            Conv2D(c1, c2, 5, name="conv2"),         # 12 -> 8
            _act(c2, "act2", flags[1]),
            MaxPool(2, name="pool2"),                # 8 -> 4
            Flatten(),
            Dense(c2 * 16, f1, name="fc1"),
            _act(f1, "act3", flags[2]),
            Dense(f1, 10, name="fc2"),
        ]
    elif preset == "cifar-small":
        c1, c2, c3, f1 = w(16), w(24), w(32), w(64)
        flags = _parse_mask(binarize, 4)
        layers = [
            Conv2D(3, c1, 5, pad=2, name="conv1"),   # 32
            _act(c1, "act1", flags[0]),
            MaxPool(2, name="pool1"),                # 16
            Conv2D(c1, c2, 5, pad=2, name="conv2"),  # 16
            _act(c2, "act2", flags[1]),
            MaxPool(2, name="pool2"),                # 8
            Conv2D(c2, c3, 3, pad=1, name="conv3"),  # 8
            _act(c3, "act3", flags[2]),
            MaxPool(2, name="pool3"),                # 4
            Flatten(),
            Dense(c3 * 16, f1, name="fc1"),
            _act(f1, "act4", flags[3]),
            Dense(f1, 10, name="fc2"),
        ]
    elif preset == "mlp-tiny":
        f1 = w(32)
        flags = _parse_mask(binarize, 1)
        layers = [
            Flatten(),
            Dense(784, f1, name="fc1"),
            _act(f1, "act1", flags[0]),
            Dense(f1, 10, name="fc2"),
        ]
    else:
        raise ValueError(f"unknown preset {preset!r}")
    return Network(layers)


PRESETS = ("lenet-small", "cifar-small", "mlp-tiny")
