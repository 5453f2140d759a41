"""Firing-pattern analysis of a binary layer: class-conditional firing
rates, positive/negative class detection, and the one-unit group
classifier built from a single binary neuron."""

import csv
from dataclasses import dataclass

import numpy as np

from .activation import STEP


@dataclass
class FiringMatrix:
    rates: np.ndarray         # [num_classes, num_units], mean binary activation
    class_counts: np.ndarray  # samples per class


@dataclass
class UnitClassSplit:
    unit: int
    positive: frozenset
    negative: frozenset
    ambiguous: frozenset


def firing_matrix(net, images, labels, layer, batch_size=256):
    """rates[c, u] = mean over class-c samples of unit u's step-mode output."""
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=num_classes)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0)
        raise ValueError(f"classes with zero samples: {empty.tolist()}")
    net.set_mode(STEP)
    sums = None
    for i in range(0, len(images), batch_size):
        _, captured = net.forward(images[i:i + batch_size], capture=True)
        if layer not in captured:
            raise KeyError(f"no bounded rectifier named {layer!r}")
        acts = captured[layer].reshape(len(captured[layer]), -1)
        if sums is None:
            sums = np.zeros((num_classes, acts.shape[1]))
        np.add.at(sums, labels[i:i + batch_size], acts)
    return FiringMatrix(rates=sums / counts[:, None], class_counts=counts)


def detect_splits(fm, tau_pos=0.95, tau_neg=0.05):
    """Partition classes per unit: positive if rate >= tau_pos, negative if
    <= tau_neg, else ambiguous."""
    splits = []
    n_classes, n_units = fm.rates.shape
    classes = np.arange(n_classes)
    for u in range(n_units):
        col = fm.rates[:, u]
        pos = frozenset(classes[col >= tau_pos].tolist())
        neg = frozenset(classes[col <= tau_neg].tolist())
        amb = frozenset(classes.tolist()) - pos - neg
        splits.append(UnitClassSplit(u, pos, neg, amb))
    return splits


class OneUnitClassifier:
    """Group separator from one binary unit: score_c = w_c * (a - 0.5) with
    w_c = +1 for positive classes, -1 for negative, 0 for ambiguous."""

    def __init__(self, split):
        if not split.positive or not split.negative:
            raise ValueError("positive and negative class sets must be non-empty")
        self.split = split
        n = max(max(split.positive), max(split.negative),
                max(split.ambiguous, default=0)) + 1
        self.weights = np.zeros(n)
        self.weights[list(split.positive)] = 1.0
        self.weights[list(split.negative)] = -1.0

    def scores(self, activation):
        return self.weights * (activation - 0.5)

    def predicts_positive(self, activation):
        return activation == 1.0


def one_unit_classifier(split):
    return OneUnitClassifier(split)


def write_firing_matrix_csv(path, fm):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class"] + [f"unit_{u}" for u in range(fm.rates.shape[1])])
        for c in range(fm.rates.shape[0]):
            writer.writerow([c] + fm.rates[c].tolist())


def write_split_report(path, splits):
    with open(path, "w") as f:
        for s in splits:
            f.write(f"unit {s.unit} positive={sorted(s.positive)} "
                    f"negative={sorted(s.negative)}\n")
