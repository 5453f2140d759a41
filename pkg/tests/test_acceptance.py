"""Acceptance suite: ten end-to-end checks at pinned tolerances.

Each test prints one pass/fail line. Training-based checks share
session-scoped fixtures, so the suite trains each model once. Dataset
files are generated stand-ins written in the real MNIST/CIFAR-10 binary
formats (this machine cannot reach the dataset download hosts).
"""

import copy
import itertools
import time

import numpy as np
import pytest

from binrep import activation as A
from binrep import engine as E
from binrep import tensor as T
from binrep.activation import BoundedRectifier, LINEAR, STEP
from binrep.data import load_cifar10, load_mnist
from binrep.metrics import binarization_report
from binrep.network import (Dense, Network, ReLULayer, build_preset,
                            xavier_init)
from binrep.schedule import (GrowthConfig, SolverConfig, finetune_head,
                             init_network, ternarize_and_finetune,
                             train_two_phase)
from binrep.synth import make_cifar10_like, make_mnist_like

from conftest import central_diff, rel_err


def announce(capsys, num, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {num:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num}: {detail}"


# --- shared training fixtures -------------------------------------------

@pytest.fixture(scope="session")
def mnist_run(tmp_path_factory):
    """Last-layer binarization on the digit dataset (criteria 4 and 6)."""
    d = tmp_path_factory.mktemp("accept_mnist")
    make_mnist_like(str(d), n_train=8000, n_test=1000, seed=0, noise=5.0)
    train, test = load_mnist(str(d))
    net = init_network(build_preset("lenet-small", binarize="last"), seed=0)
    state = train_two_phase(net, train, test,
                            GrowthConfig(1e-3, 0.5, 10, 8),
                            SolverConfig(lr=0.05), seed=0)
    net.set_mode(LINEAR)
    linear_acc = net.accuracy(test.images, test.labels)
    net.set_mode(STEP)
    step_acc = net.accuracy(test.images, test.labels)
    net.set_mode(LINEAR)
    return {"net": net, "state": state, "test": test,
            "linear_acc": linear_acc, "step_acc": step_acc}


def _accuracy(net, ds, mode):
    net.set_mode(mode)
    acc = net.accuracy(ds.images, ds.labels)
    net.set_mode(LINEAR)
    return acc


def _train_cifar(train, test, width_mult, seed):
    """Whole-net two-phase run; returns stage accuracies and the net.

    All-bounded stacks need a smaller rate than the ReLU baseline: the
    narrow linear zone around 0.5 saturates (and kills gradients) under
    large momentum steps. The wider variant is touchier still — its fc
    pre-activation offsets grow with fan-in — so it gets bias-centering
    calibration at init and a further halved rate.
    """
    wide = width_mult > 1.0
    net = init_network(build_preset("cifar-small", width_mult, "all"),
                       seed=seed,
                       calibration=train.images[:512] if wide else None)
    solver = SolverConfig(lr=0.005 if wide else 0.01)
    st1 = train_two_phase(net, train, test, GrowthConfig(1e-3, 1e-3, 10, 0),
                          solver, seed=seed)
    stages = {"1st Phase": _accuracy(net, test, LINEAR),
              "1st Binary": _accuracy(net, test, STEP)}
    st2 = train_two_phase(net, train, test, GrowthConfig(1e-3, 0.02, 0, 8),
                          solver, seed=seed)
    stages["2nd Phase"] = _accuracy(net, test, LINEAR)
    stages["2nd Binary"] = _accuracy(net, test, STEP)
    last = st2.history[-1]
    return net, stages, last["test_loss"] - last["train_loss"]


@pytest.fixture(scope="session")
def cifar_bundle(tmp_path_factory):
    """All CIFAR-scale runs (criteria 5, 8, 9, 10) off one dataset."""
    d = tmp_path_factory.mktemp("accept_cifar")
    make_cifar10_like(str(d), n_train=4000, n_test=1000, seed=0,
                      label_noise=0.10, signal=0.30)
    train, test = load_cifar10(str(d))

    base = init_network(build_preset("cifar-small", binarize="none"), seed=11)
    st_base = train_two_phase(base, train, test, GrowthConfig(0, 0, 16, 0),
                              SolverConfig(lr=0.01), seed=11)
    regular = base.accuracy(test.images, test.labels)
    base_gap = (st_base.history[-1]["test_loss"]
                - st_base.history[-1]["train_loss"])

    net, stages, bounded_gap = _train_cifar(train, test, 1.0, seed=11)
    stages["Regular"] = regular

    ft = copy.deepcopy(net)
    finetune_head(ft, train, SolverConfig(lr=0.005), epochs=3, seed=11)
    stages["Finetuned"] = _accuracy(ft, test, STEP)

    tern = copy.deepcopy(ft)
    ternarize_and_finetune(tern, train, SolverConfig(lr=0.005), epochs=10,
                           seed=11)
    stages["Ternary"] = _accuracy(tern, test, STEP)

    _, stages2x, _ = _train_cifar(train, test, 2.0, seed=11)

    return {"train": train, "test": test, "stages": stages,
            "stages_2x": stages2x, "ternary_net": tern,
            "base_gap": base_gap, "bounded_gap": bounded_gap}


# --- criterion 1: gradient suite ----------------------------------------

def _check_fc(rng):
    x = rng.normal(size=(2, 3))
    w = T.Parameter(rng.normal(size=(4, 3)))
    b = T.Parameter(rng.normal(size=4))
    up = rng.normal(size=(2, 4))
    xt = T.Tensor(x.copy(), requires_grad=True)
    T.tsum(T.fc_forward(xt, w, b) * T.Tensor(up)).backward()

    def f_of(target, make):
        return central_diff(lambda v: float((make(v) * up).sum()), target)

    errs = [rel_err(xt.grad, f_of(x.copy(), lambda v: T.fc_forward(
        T.Tensor(v), T.Tensor(w.data), T.Tensor(b.data)).data))]
    errs.append(rel_err(w.grad, f_of(w.data.copy(), lambda v: T.fc_forward(
        T.Tensor(x), T.Tensor(v), T.Tensor(b.data)).data)))
    errs.append(rel_err(b.grad, f_of(b.data.copy(), lambda v: T.fc_forward(
        T.Tensor(x), T.Tensor(w.data), T.Tensor(v)).data)))
    return max(errs)


def _check_conv(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    w = T.Parameter(rng.normal(size=(3, 2, 3, 3)))
    b = T.Parameter(rng.normal(size=3))
    up = rng.normal(size=(1, 3, 3, 3))
    xt = T.Tensor(x.copy(), requires_grad=True)
    T.tsum(T.conv2d_forward(xt, w, b) * T.Tensor(up)).backward()

    def num(target, make):
        return central_diff(lambda v: float((make(v) * up).sum()), target)

    errs = [rel_err(xt.grad, num(x.copy(), lambda v: T.conv2d_forward(
        T.Tensor(v), T.Tensor(w.data), T.Tensor(b.data)).data))]
    errs.append(rel_err(w.grad, num(w.data.copy(), lambda v: T.conv2d_forward(
        T.Tensor(x), T.Tensor(v), T.Tensor(b.data)).data)))
    errs.append(rel_err(b.grad, num(b.data.copy(), lambda v: T.conv2d_forward(
        T.Tensor(x), T.Tensor(w.data), T.Tensor(v)).data)))
    return max(errs)


def _check_pool(rng):
    # Distinct values keep the argmax stable under the probe step.
    x = rng.permutation(16).reshape(1, 1, 4, 4) + rng.uniform(0, 0.4, (1, 1, 4, 4))
    up = rng.normal(size=(1, 1, 2, 2))
    xt = T.Tensor(x.copy(), requires_grad=True)
    T.tsum(T.maxpool_forward(xt, 2) * T.Tensor(up)).backward()
    num = central_diff(lambda v: float(
        (T.maxpool_forward(T.Tensor(v), 2).data * up).sum()), x.copy())
    return rel_err(xt.grad, num)


def _check_rectifier(rng):
    # Interior points only: |k*y| <= 0.35 keeps k*y+0.5 in (0.1, 0.9),
    # far from the clip boundaries where the derivative is discontinuous.
    k = rng.uniform(0.5, 2.0, size=3) * rng.choice([-1.0, 1.0], size=3)
    y = rng.uniform(-0.35, 0.35, size=(4, 3)) / np.abs(k)
    up = rng.normal(size=(4, 3))
    layer = BoundedRectifier(3)
    layer.slopes.data = k.copy()
    yt = T.Tensor(y.copy(), requires_grad=True)
    T.tsum(layer(yt) * T.Tensor(up)).backward()
    err_y = rel_err(yt.grad, central_diff(
        lambda v: float((A.bounded_forward(v, k) * up).sum()), y.copy()))
    err_k = rel_err(layer.slopes.grad, central_diff(
        lambda v: float((A.bounded_forward(y, v) * up).sum()), k.copy()))
    return max(err_y, err_k)


def _check_relu(rng):
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 0.1] += 0.2  # stay away from the kink
    up = rng.normal(size=(3, 4))
    xt = T.Tensor(x.copy(), requires_grad=True)
    T.tsum(T.relu(xt) * T.Tensor(up)).backward()
    num = central_diff(lambda v: float((np.maximum(v, 0) * up).sum()), x.copy())
    return rel_err(xt.grad, num)


def _check_softmax(rng):
    logits = rng.normal(size=(3, 5))
    labels = rng.integers(0, 5, size=3)
    t = T.Tensor(logits.copy(), requires_grad=True)
    T.softmax_ce_loss(t, labels).backward()
    num = central_diff(lambda v: float(
        T.softmax_ce_loss(T.Tensor(v), labels).data), logits.copy())
    return rel_err(t.grad, num)


def test_criterion_1_gradient_suite(capsys):
    checks = {"fc": _check_fc, "conv": _check_conv, "maxpool": _check_pool,
              "rectifier": _check_rectifier, "relu": _check_relu,
              "softmax_ce": _check_softmax}
    t0 = time.time()
    worst = {}
    for name, check in checks.items():
        rng = np.random.default_rng(hash(name) % 2**32)
        worst[name] = max(check(rng) for _ in range(100))
    elapsed = time.time() - t0
    bad = {n: e for n, e in worst.items() if e >= 1e-4}
    ok = not bad and elapsed < 60
    announce(capsys, 1, ok,
             f"max rel err {max(worst.values()):.2e} over "
             f"{len(checks)} ops x 100 cases in {elapsed:.1f}s")


# --- criterion 2: slope absorption --------------------------------------

def test_criterion_2_absorption(capsys):
    rng = np.random.default_rng(2)
    net = Network([
        Dense(6, 8, name="fc1"), BoundedRectifier(8, name="act1"),
        Dense(8, 8, name="fc2"), BoundedRectifier(8, name="act2"),
        Dense(8, 4, name="fc3"),
    ])
    xavier_init(net, seed=2)
    for r in net.rectifiers():
        r.slopes.data = rng.uniform(0.2, 5.0, r.slopes.data.shape) \
            * rng.choice([-1.0, 1.0], r.slopes.data.shape)
    absorbed = A.absorb_slopes(net)
    x = rng.normal(size=(100, 6))
    diff = float(np.max(np.abs(net.forward(x).data - absorbed.forward(x).data)))
    for r in absorbed.rectifiers():
        assert np.all(r.slopes.data == 1.0)
    announce(capsys, 2, diff < 1e-9,
             f"max output drift {diff:.2e} over 100 inputs (tol 1e-9)")


# --- criterion 3: ReLU cast ---------------------------------------------

def test_criterion_3_relu_cast(capsys):
    rng = np.random.default_rng(3)
    d1, d2 = Dense(5, 7, name="fc1"), Dense(7, 4, name="fc2")
    d1.weight.data = rng.normal(scale=0.6, size=(7, 5))
    d1.bias.data = rng.normal(scale=0.3, size=7)
    d2.weight.data = rng.normal(scale=0.6, size=(4, 7))
    d2.bias.data = rng.normal(scale=0.3, size=4)
    net = Network([d1, ReLULayer(name="relu1"), d2])
    calib = rng.normal(size=(1000, 5))
    cast = A.cast_relu_net(net, calib)
    diff = float(np.max(np.abs(net.forward(calib).data
                               - cast.forward(calib).data)))
    announce(capsys, 3, diff < 1e-6,
             f"max deviation {diff:.2e} on 1000 calibration points (tol 1e-6)")


# --- criterion 4: last-layer binarization accuracy ----------------------

def test_criterion_4_last_layer_accuracy(capsys, mnist_run):
    linear, step = mnist_run["linear_acc"], mnist_run["step_acc"]
    ok = step >= 0.98 and abs(linear - step) <= 0.005
    announce(capsys, 4, ok,
             f"step {step:.4f} (floor 0.98), linear {linear:.4f}, "
             f"gap {abs(linear - step):.4f} (cap 0.005)")


# --- criterion 6: telemetry shape ---------------------------------------

def test_criterion_6_binarization_telemetry(capsys, mnist_run):
    history = mnist_run["state"].history
    fracs = [rec["report"].fraction_at("act3", 0.99)
             for rec in history if rec["phase"] == "Two"]
    drops = [a - b for a, b in zip(fracs, fracs[1:]) if b < a]
    monotone = all(b >= a - 0.02 for a, b in zip(fracs, fracs[1:]))
    ok = monotone and fracs[-1] >= 0.95
    announce(capsys, 6, ok,
             f"phase-2 binary fraction {fracs[0]:.3f} -> {fracs[-1]:.3f}, "
             f"max drop {max(drops, default=0.0):.3f} (tol 0.02), "
             f"final floor 0.95")


# --- criterion 7: packed-engine bit-exactness ----------------------------

def test_criterion_7_packed_exactness(capsys, tmp_path_factory):
    d = tmp_path_factory.mktemp("accept_pack")
    make_mnist_like(str(d), n_train=60, n_test=1000, seed=7)
    _, test = load_mnist(str(d))

    # Fully binarized convnet: real first layer, sign weights elsewhere.
    rng = np.random.default_rng(7)
    net = build_preset("lenet-small", binarize="all")
    xavier_init(net, seed=7)
    for layer in net.affine_layers()[1:]:
        layer.weight.data = rng.choice([-1.0, 1.0], layer.weight.data.shape)
    for layer in net.affine_layers():
        layer.bias.data = rng.uniform(-2, 2, layer.bias.data.shape)
    for r in net.rectifiers():
        r.slopes.data = rng.uniform(1, 4, r.slopes.data.shape) \
            * rng.choice([-1.0, 1.0], r.slopes.data.shape)
    net.set_mode(STEP)
    model = E.export_packed(net)
    packed_pred = E.packed_forward(model, test.images).argmax(axis=1)
    float_pred = net.forward(test.images).data.argmax(axis=1)
    mismatches = int(np.sum(packed_pred != float_pred))

    # Popcount identity, exhaustive for n <= 8.
    identity_bad = 0
    for n in range(1, 9):
        combos = np.array(list(itertools.product([0, 1], repeat=n)),
                          dtype=np.uint8)
        got = E.popcount_dot(E.pack_bits(combos), E.pack_bits(combos))
        expected = combos.astype(np.int64) @ (2 * combos.astype(np.int64) - 1).T
        identity_bad += int(np.sum(got != expected))

    # And on 1e5 random wide vectors.
    a = rng.integers(0, 2, size=(100_000, 192), dtype=np.uint8)
    w = rng.integers(0, 2, size=(4, 192), dtype=np.uint8)
    got = E.popcount_dot(E.pack_bits(w), E.pack_bits(a))
    expected = a.astype(np.int64) @ (2 * w.astype(np.int64) - 1).T
    identity_bad += int(np.sum(got != expected))

    ok = mismatches == 0 and identity_bad == 0
    announce(capsys, 7, ok,
             f"{mismatches} prediction mismatches on {len(test)} images; "
             f"{identity_bad} popcount identity violations "
             f"(exhaustive n<=8 + 1e5 random)")


# --- criteria 5, 8, 9, 10: CIFAR-scale runs ------------------------------

def test_criterion_5_stage_ordering(capsys, cifar_bundle):
    s = cifar_bundle["stages"]
    chain = ["Regular", "2nd Phase", "Finetuned", "2nd Binary", "1st Binary"]
    values = [s[name] for name in chain]
    ok = all(a >= b for a, b in zip(values, values[1:]))
    announce(capsys, 5, ok,
             " >= ".join(f"{n} {v:.3f}" for n, v in zip(chain, values)))


def test_criterion_8_width_effect(capsys, cifar_bundle):
    one = cifar_bundle["stages"]["2nd Binary"]
    two = cifar_bundle["stages_2x"]["2nd Binary"]
    announce(capsys, 8, two > one,
             f"binary accuracy 1x {one:.3f} -> 2x {two:.3f} "
             f"(gap {two - one:+.3f}, must be > 0)")


def test_criterion_9_ternarization(capsys, cifar_bundle):
    tern = cifar_bundle["ternary_net"]
    acc = cifar_bundle["stages"]["Ternary"]
    finetuned = cifar_bundle["stages"]["Finetuned"]
    nonbinary = sum(int(np.sum(np.abs(l.weight.data) != 1.0))
                    for l in tern.affine_layers()[1:])
    ok = acc < finetuned and acc >= 0.10 + 0.40 and nonbinary == 0
    announce(capsys, 9, ok,
             f"ternary step accuracy {acc:.3f} (floor 0.50 = chance + 40pts, "
             f"degraded from {finetuned:.3f}), "
             f"{nonbinary} non-sign weights in frozen layers")


def test_criterion_10_generalization_gap(capsys, cifar_bundle):
    base, ours = cifar_bundle["base_gap"], cifar_bundle["bounded_gap"]
    announce(capsys, 10, ours < base,
             f"final test-train loss gap: bounded+growth {ours:.3f} "
             f"< relu baseline {base:.3f}")
