"""Minimal reverse-mode autodiff over dense float64 arrays.

Define-by-run: each op builds a node holding its inputs and a closure that
pushes the upstream gradient back to them. The graph is rebuilt every batch.
"""

import numpy as np


class ShapeError(ValueError):
    """Raised when operand dimensions do not agree."""


class GraphError(RuntimeError):
    """Raised on invalid graph state (e.g. backward from a non-scalar)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        """Accumulate gradients of this scalar into every reachable node."""
        if self.data.size != 1:
            raise GraphError("backward() requires a scalar root")
        order = []
        seen = set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            order.append(node)

        visit(self)
        for node in order:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        other = _lift(other)
        out = Tensor(self.data + other.data,
                     requires_grad=self.requires_grad or other.requires_grad,
                     _parents=(self, other))
        def back(g):
            _accum(self, _unbroadcast(g, self.data.shape))
            _accum(other, _unbroadcast(g, other.data.shape))
        out._backward = back
        return out

    def __mul__(self, other):
        other = _lift(other)
        out = Tensor(self.data * other.data,
                     requires_grad=self.requires_grad or other.requires_grad,
                     _parents=(self, other))
        def back(g):
            _accum(self, _unbroadcast(g * other.data, self.data.shape))
            _accum(other, _unbroadcast(g * self.data, other.data.shape))
        out._backward = back
        return out

    __radd__ = __add__
    __rmul__ = __mul__


class Parameter(Tensor):
    """Learnable tensor. Freezing clears requires_grad so backward skips it."""

    __slots__ = ("name",)

    def __init__(self, data, name="", trainable=True):
        super().__init__(data, requires_grad=trainable)
        self.name = name

    @property
    def trainable(self):
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.requires_grad = bool(flag)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(node, g):
    if node.requires_grad or node._backward is not None:
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad += g


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def tsum(x):
    """Sum all elements to a scalar tensor."""
    out = Tensor(x.data.sum(), requires_grad=x.requires_grad, _parents=(x,))
    out._backward = lambda g: _accum(x, np.full_like(x.data, float(g)))
    return out


def fc_forward(x, weight, bias):
    """out[b,o] = sum_i weight[o,i] * x[b,i] + bias[o]"""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"fc expects 2-d input/weight, got {x.shape} / {weight.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(f"fc input width {x.data.shape[1]} != weight fan-in {weight.data.shape[1]}")
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(f"fc bias shape {bias.data.shape} != ({weight.data.shape[0]},)")
    out = Tensor(x.data @ weight.data.T + bias.data,
                 requires_grad=x.requires_grad or weight.requires_grad or bias.requires_grad,
                 _parents=(x, weight, bias))
    def back(g):
        _accum(x, g @ weight.data)
        _accum(weight, g.T @ x.data)
        _accum(bias, g.sum(axis=0))
    out._backward = back
    return out


def _im2col_indices(c, h, w, kh, kw, stride, pad):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    i0 = np.repeat(np.arange(kh), kw)
    i0 = np.tile(i0, c)
    i1 = stride * np.repeat(np.arange(oh), ow)
    j0 = np.tile(np.arange(kw), kh * c)
    j1 = stride * np.tile(np.arange(ow), oh)
    i = i0.reshape(-1, 1) + i1.reshape(1, -1)
    j = j0.reshape(-1, 1) + j1.reshape(1, -1)
    k = np.repeat(np.arange(c), kh * kw).reshape(-1, 1)
    return k, i, j, oh, ow


def im2col(x, kh, kw, stride, pad):
    """x [b,c,h,w] -> cols [b, c*kh*kw, oh*ow]."""
    b, c, h, w = x.shape
    k, i, j, oh, ow = _im2col_indices(c, h, w, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return xp[:, k, i, j], oh, ow


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Scatter-add inverse of im2col."""
    b, c, h, w = x_shape
    k, i, j, _, _ = _im2col_indices(c, h, w, kh, kw, stride, pad)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    np.add.at(xp, (slice(None), k, i, j), cols)
    if pad == 0:
        return xp
    return xp[:, :, pad:-pad, pad:-pad]


def conv2d_forward(x, weight, bias, stride=1, pad=0):
    """Cross-correlation with zero padding (no kernel flip)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape} / {weight.shape}")
    b, c_in, h, w = x.data.shape
    c_out, c_in_w, kh, kw = weight.data.shape
    if c_in != c_in_w:
        raise ShapeError(f"conv2d channel mismatch: input {c_in}, weight {c_in_w}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d output size {oh}x{ow} is non-positive")
    cols, oh, ow = im2col(x.data, kh, kw, stride, pad)
    wmat = weight.data.reshape(c_out, -1)
    y = np.einsum("oc,bcl->bol", wmat, cols) + bias.data.reshape(1, c_out, 1)
    out = Tensor(y.reshape(b, c_out, oh, ow),
                 requires_grad=x.requires_grad or weight.requires_grad or bias.requires_grad,
                 _parents=(x, weight, bias))
    def back(g):
        gmat = g.reshape(b, c_out, -1)
        _accum(weight, np.einsum("bol,bcl->oc", gmat, cols).reshape(weight.data.shape))
        _accum(bias, gmat.sum(axis=(0, 2)))
        gcols = np.einsum("oc,bol->bcl", wmat, gmat)
        _accum(x, col2im(gcols, x.data.shape, kh, kw, stride, pad))
    out._backward = back
    return out


def maxpool_forward(x, window, stride=None):
    """Per-window max; gradient routes to the first argmax in scan order."""
    stride = stride or window
    b, c, h, w = x.data.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds spatial extent {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    cols, _, _ = im2col(x.data.reshape(b * c, 1, h, w), window, window, stride, 0)
    # cols: [b*c, window*window, oh*ow]
    arg = cols.argmax(axis=1)
    y = np.take_along_axis(cols, arg[:, None, :], axis=1)[:, 0, :]
    out = Tensor(y.reshape(b, c, oh, ow), requires_grad=x.requires_grad, _parents=(x,))
    def back(g):
        gcols = np.zeros_like(cols)
        np.put_along_axis(gcols, arg[:, None, :], g.reshape(b * c, 1, -1), axis=1)
        gx = col2im(gcols, (b * c, 1, h, w), window, window, stride, 0)
        _accum(x, gx.reshape(b, c, h, w))
    out._backward = back
    return out


def relu(x):
    mask = x.data > 0
    out = Tensor(x.data * mask, requires_grad=x.requires_grad, _parents=(x,))
    out._backward = lambda g: _accum(x, g * mask)
    return out


def flatten(x):
    b = x.data.shape[0]
    out = Tensor(x.data.reshape(b, -1), requires_grad=x.requires_grad, _parents=(x,))
    out._backward = lambda g: _accum(x, g.reshape(x.data.shape))
    return out


def softmax_ce_loss(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    loss = -np.mean(np.log(probs[np.arange(n), labels] + 1e-300))
    out = Tensor(loss, requires_grad=logits.requires_grad, _parents=(logits,))
    def back(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        _accum(logits, float(g) * d / n)
    out._backward = back
    return out


def neg_log_abs_sum(x):
    """sum_i -ln|x_i|; singular at zero."""
    if np.any(x.data == 0.0):
        raise ValueError("neg_log_abs_sum: zero entry")
    out = Tensor(-np.log(np.abs(x.data)).sum(), requires_grad=x.requires_grad, _parents=(x,))
    out._backward = lambda g: _accum(x, float(g) * (-1.0 / x.data))
    return out


class SGD:
    """Momentum SGD: v <- momentum*v - lr*(g + wd*p); p <- p + v."""

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._vel = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self._vel):
            if not p.trainable or p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v -= self.lr * g
            p.data += v
