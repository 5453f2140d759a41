"""Binarization telemetry: per-unit binary fractions, threshold curves,
zero/one split and train/test loss gap."""

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass
class LayerReport:
    layer: str
    unit_fractions: np.ndarray          # per scalar unit: fraction of samples at exactly 0 or 1
    curve: dict                         # threshold -> fraction of units with unit_fraction >= threshold
    zero_fraction: float                # over all (sample, unit) pairs
    one_fraction: float


@dataclass
class BinarizationReport:
    layers: dict = field(default_factory=dict)  # layer name -> LayerReport

    def fraction_at(self, layer, threshold):
        return self.layers[layer].curve[threshold]


def _layer_report(name, acts, thresholds):
    # acts: [samples, ...units]; a unit is one scalar coordinate.
    flat = acts.reshape(acts.shape[0], -1)
    is_zero = flat == 0.0
    is_one = flat == 1.0
    binary = is_zero | is_one
    unit_frac = binary.mean(axis=0)
    curve = {t: float(np.mean(unit_frac >= t)) for t in thresholds}
    return LayerReport(
        layer=name,
        unit_fractions=unit_frac,
        curve=curve,
        zero_fraction=float(is_zero.mean()),
        one_fraction=float(is_one.mean()),
    )


def binarization_report(net, images, thresholds=(0.9, 0.99, 0.999), batch_size=256):
    """Per-layer binary statistics of the bounded-rectifier outputs.

    A unit counts as binary on a sample iff its output is exactly 0.0 or
    1.0; clipping produces exact values, so no tolerance is involved.
    """
    if len(images) == 0:
        raise ValueError("empty evaluation set")
    collected = {}
    for i in range(0, len(images), batch_size):
        _, captured = net.forward(images[i:i + batch_size], capture=True)
        for name, acts in captured.items():
            collected.setdefault(name, []).append(acts)
    report = BinarizationReport()
    for name, chunks in collected.items():
        acts = np.concatenate(chunks, axis=0)
        report.layers[name] = _layer_report(name, acts, thresholds)
    return report


class NotBinaryError(ValueError):
    """Layer is not sufficiently binarized for the requested statistic."""


def zero_one_split(net, images, layer, min_binary=0.999, batch_size=256):
    """(zero_fraction, one_fraction) over all (sample, unit) pairs of one layer."""
    report = binarization_report(net, images, thresholds=(min_binary,),
                                 batch_size=batch_size)
    if layer not in report.layers:
        raise KeyError(f"no bounded rectifier named {layer!r}")
    lr = report.layers[layer]
    if np.any(lr.unit_fractions < min_binary):
        worst = float(lr.unit_fractions.min())
        raise NotBinaryError(
            f"{layer}: unit binary-fraction down to {worst:.4f} < {min_binary}")
    return lr.zero_fraction, lr.one_fraction


def generalization_gap(train_losses, test_losses):
    """Elementwise test - train loss."""
    train = np.asarray(train_losses, dtype=np.float64)
    test = np.asarray(test_losses, dtype=np.float64)
    if train.shape != test.shape:
        raise ValueError(f"series length mismatch: {train.shape} vs {test.shape}")
    return test - train


def write_report_csv(path, history):
    """One row per (epoch, layer, threshold); stable column order."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "layer", "threshold", "fraction"])
        for rec in history:
            report = rec["report"]
            for layer in sorted(report.layers):
                for t in sorted(report.layers[layer].curve):
                    writer.writerow([rec["epoch"], layer, t,
                                     report.layers[layer].curve[t]])


def write_history_csv(path, history):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "phase", "train_loss", "test_loss",
                         "test_acc", "mean_abs_slope"])
        for rec in history:
            writer.writerow([rec["epoch"], rec["phase"], rec["train_loss"],
                             rec["test_loss"], rec["test_acc"],
                             rec["mean_abs_slope"]])
