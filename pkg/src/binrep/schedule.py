"""Two-phase training with slope growth.

Phase 1 adds a mild -log|k| growth term to the task loss (so it rides the
learning rate like any other loss term). Phase 2 switches to an aggressive
growth step applied after each solver update, outside the learning rate,
to push the remaining continuous activations to binary.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .activation import LINEAR, STEP
from .data import batch_iterator
from .metrics import binarization_report
from .network import Conv2D, Dense, Network, xavier_init
from .tensor import Tensor


class SingularSlopeError(ValueError):
    """-log|k| is undefined at k == 0."""


class TrainingDiverged(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class GrowthConfig:
    phase1_lambda: float = 1e-4
    phase2_lambda: float = 1e-2
    phase1_epochs: int = 10
    phase2_epochs: int = 10
    growth_cap: float = 0.5  # max |delta k| per step, as a fraction of |k|

    def __post_init__(self):
        if self.phase2_lambda < self.phase1_lambda:
            raise ValueError("phase2_lambda must be >= phase1_lambda")
        if self.growth_cap <= 0:
            raise ValueError("growth_cap must be positive")


@dataclass
class SolverConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    # Step decay entering phase 2: growing slopes raise the effective
    # gradient scale, so the base rate comes down in compensation.
    phase2_lr_scale: float = 0.1


@dataclass
class TrainState:
    epoch: int = 0
    phase: str = "One"  # One | Two | Frozen
    running_loss: float = 0.0
    history: list = field(default_factory=list)


def growth_loss(slopes):
    """sum_i -ln|k_i|."""
    slopes = np.asarray(slopes, dtype=np.float64)
    if np.any(slopes == 0.0):
        raise SingularSlopeError("slope exactly zero")
    return float(-np.log(np.abs(slopes)).sum())


def growth_update(slopes, lam, cap):
    """k <- k + clamp(lam/k, +-cap*|k|), independent of the learning rate.

    |k| strictly grows for lam > 0 and the sign never flips (the cap keeps
    the step below |k| itself).
    """
    slopes = np.asarray(slopes, dtype=np.float64)
    if lam == 0.0:
        return slopes.copy()
    delta = lam / slopes
    limit = cap * np.abs(slopes)
    return slopes + np.clip(delta, -limit, limit)


def init_network(net, seed=0, calibration=None):
    """Xavier weights, zero biases, all slopes 1.

    With a `calibration` image batch, biases are then shifted so every
    affine pre-activation is zero-mean over it. The bounded rectifier's
    linear zone at unit slope is only |y| < 0.5, and the random per-unit
    offset of the pre-activation mean grows with fan-in, so wide stacks
    start (and quickly die) saturated without this centering.
    """
    xavier_init(net, seed=seed)
    if calibration is not None:
        h = T.Tensor(np.asarray(calibration, dtype=np.float64))
        for layer in net.layers:
            h = layer(h)
            if isinstance(layer, (Conv2D, Dense)):
                v = h.data
                axes = tuple(i for i in range(v.ndim) if i != 1)
                mean = v.mean(axis=axes)
                layer.bias.data = layer.bias.data - mean
                h = T.Tensor(v - mean.reshape((1, -1) + (1,) * (v.ndim - 2)))
    return net


def _epoch_pass(net, ds, solver, seed, phase, growth, opt):
    """One epoch of SGD; returns mean batch loss."""
    losses = []
    rects = net.rectifiers()
    for images, labels in batch_iterator(ds, solver.batch_size, seed):
        opt.zero_grad()
        logits = net.forward(images)
        loss = T.softmax_ce_loss(logits, labels)
        if phase == "One" and growth.phase1_lambda > 0 and rects:
            for r in rects:
                loss = loss + growth.phase1_lambda * T.neg_log_abs_sum(r.slopes)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise TrainingDiverged(
                "non-finite loss", snapshot={
                    "phase": phase, "loss": loss_val,
                    "slopes": {r.name: r.slopes.data.copy() for r in rects},
                })
        loss.backward()
        opt.step()
        if phase == "Two" and growth.phase2_lambda > 0:
            for r in rects:
                if r.slopes.trainable:
                    r.slopes.data = growth_update(
                        r.slopes.data, growth.phase2_lambda, growth.growth_cap)
        losses.append(loss_val)
    return float(np.mean(losses)) if losses else 0.0


def _eval_loss(net, ds, batch_size=256):
    total, n = 0.0, 0
    for i in range(0, len(ds.images), batch_size):
        logits = net.forward(ds.images[i:i + batch_size])
        loss = T.softmax_ce_loss(logits, ds.labels[i:i + batch_size])
        total += float(loss.data) * len(ds.labels[i:i + batch_size])
        n += len(ds.labels[i:i + batch_size])
    return total / max(n, 1)


def mean_abs_slope(net):
    rects = net.rectifiers()
    if not rects:
        return 0.0
    return float(np.mean([np.mean(np.abs(r.slopes.data)) for r in rects]))


def train_two_phase(net, train_ds, test_ds, growth, solver, seed=0,
                    thresholds=(0.9, 0.99, 0.999), log=None):
    """Run both phases; returns a TrainState with per-epoch telemetry."""
    state = TrainState()
    opt = T.SGD(net.parameters(), solver.lr, solver.momentum, solver.weight_decay)
    plan = [("One", growth.phase1_epochs), ("Two", growth.phase2_epochs)]
    for phase, n_epochs in plan:
        state.phase = phase
        if phase == "Two":
            opt.lr = solver.lr * solver.phase2_lr_scale
        for _ in range(n_epochs):
            train_loss = _epoch_pass(net, train_ds, solver, seed + state.epoch,
                                     phase, growth, opt)
            net.set_mode(LINEAR)
            test_loss = _eval_loss(net, test_ds)
            test_acc = net.accuracy(test_ds.images, test_ds.labels)
            report = binarization_report(net, test_ds.images, thresholds)
            rec = {
                "epoch": state.epoch, "phase": phase,
                "train_loss": train_loss, "test_loss": test_loss,
                "test_acc": test_acc, "mean_abs_slope": mean_abs_slope(net),
                "report": report,
            }
            state.history.append(rec)
            state.running_loss = train_loss
            if log:
                log(rec)
            state.epoch += 1
    state.phase = "Frozen"
    return state


def freeze_all_but_head(net):
    head = net.head()
    for p in net.parameters():
        p.trainable = p is head.weight or p is head.bias


def finetune_head(net, train_ds, solver, epochs=3, seed=0):
    """Retrain only the final affine layer, with step-mode activations."""
    freeze_all_but_head(net)
    net.set_mode(STEP)
    opt = T.SGD(net.parameters(), solver.lr, solver.momentum, solver.weight_decay)
    dummy_growth = GrowthConfig(phase1_lambda=0, phase2_lambda=0)
    for e in range(epochs):
        _epoch_pass(net, train_ds, solver, seed + 7919 * (e + 1), "Frozen",
                    dummy_growth, opt)
    return net


def _rectifier_after(net, affine):
    idx = net.layers.index(affine)
    for layer in net.layers[idx + 1:]:
        if hasattr(layer, "slopes"):
            return layer
        if isinstance(layer, (Conv2D, Dense)):
            return None
    return None


def ternarize_and_finetune(net, train_ds, solver, epochs=8, seed=0):
    """Threshold every affine weight except the first layer's to {-1,+1}
    (sign(0) -> +1), freeze them, and finetune biases and slopes.

    A one-shot snap multiplies pre-activations by roughly 1/mean|w| and
    wrecks every operating point at once, so the weights instead walk to a
    magnitude-matched sign target over `epochs` interpolation steps with one
    epoch of bias/slope finetuning after each. Hidden layers use a per-unit
    target magnitude; since each unit's scale can be folded into its bias
    and the downstream slopes without changing step-mode behaviour, the
    final absorption leaves the weights at exactly sign(w). The output layer
    uses a single scalar magnitude so class scores stay comparable.
    """
    affines = net.affine_layers()
    originals = [layer.weight.data.copy() for layer in affines[1:]]
    scales = []
    for layer, w in zip(affines[1:], originals):
        if layer is affines[-1]:
            scales.append(float(max(np.abs(w).mean(), 1e-12)))
        else:
            s = np.abs(w).reshape(w.shape[0], -1).mean(axis=1)
            scales.append(np.maximum(s, 1e-12))
    for layer in affines:
        layer.weight.trainable = False
        layer.bias.trainable = True
    for r in net.rectifiers():
        r.slopes.trainable = True
    net.set_mode(LINEAR)
    dummy_growth = GrowthConfig(phase1_lambda=0, phase2_lambda=0)
    for e in range(epochs):
        t = (e + 1) / epochs
        for layer, w, s in zip(affines[1:], originals, scales):
            shaped = s if np.isscalar(s) \
                else s[(slice(None),) + (None,) * (w.ndim - 1)]
            target = shaped * np.where(w >= 0.0, 1.0, -1.0)
            layer.weight.data = (1.0 - t) * w + t * target
        opt = T.SGD(net.parameters(), solver.lr, solver.momentum,
                    solver.weight_decay)
        _epoch_pass(net, train_ds, solver, seed + 104729 * (e + 1), "Frozen",
                    dummy_growth, opt)
    # Absorb the target magnitudes into biases and downstream slopes so the
    # frozen weights are exactly +-1.
    for layer, w, s in zip(affines[1:], originals, scales):
        layer.weight.data = np.where(w >= 0.0, 1.0, -1.0)
        layer.bias.data = layer.bias.data / s
        rect = _rectifier_after(net, layer)
        if rect is not None:
            rect.slopes.data = rect.slopes.data * s
    return net


# --- checkpoint container: magic "BRCK", version, named f64 parameter blobs

CHECKPOINT_MAGIC = b"BRCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, net):
    params = net.named_parameters()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, p in sorted(params.items()):
            blob = name.encode()
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(p.data.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off); off += 4
            name = raw[off:off + nlen].decode(); off += nlen
            (ndim,) = struct.unpack_from("<I", raw, off); off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off); off += 4 * ndim
            size = int(np.prod(shape)) if shape else 1
            vals = np.frombuffer(raw, dtype="<f8", count=size, offset=off)
            off += 8 * size
            out[name] = vals.reshape(shape).astype(np.float64)
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated checkpoint ({e})") from e
    return out


def apply_checkpoint(net, state):
    params = net.named_parameters()
    if set(params) != set(state):
        missing = set(params) ^ set(state)
        raise CheckpointError(f"checkpoint/architecture mismatch: {sorted(missing)}")
    for name, p in params.items():
        if p.data.shape != state[name].shape:
            raise CheckpointError(
                f"{name}: shape {state[name].shape} != expected {p.data.shape}")
        p.data = state[name].copy()
    return net
