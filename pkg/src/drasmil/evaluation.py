"""Slide-level metrics, patient-stratified folds and the repeat bootstrap."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from drasmil import kernels
from drasmil.seeding import derive_seed

METRICS = ("auc", "accuracy", "balanced_accuracy", "f1")
BOOTSTRAP_CHUNK = 8192


class UndefinedMetricError(ValueError):
    pass


@dataclass
class PredictionTable:
    slide_ids: list
    patient_ids: list
    labels: np.ndarray
    probs: np.ndarray  # slides x repeats

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or len(self.probs) != len(self.slide_ids):
            raise ValueError("probs must be slides x repeats")
        if ((self.probs < 0) | (self.probs > 1)).any():
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def repeats(self) -> int:
        return self.probs.shape[1]

    def concat(self, other: "PredictionTable") -> "PredictionTable":
        return PredictionTable(self.slide_ids + other.slide_ids, self.patient_ids + other.patient_ids,
                               np.concatenate([self.labels, other.labels]),
                               np.concatenate([self.probs, other.probs]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["slide_id", "patient_id", "label"] + [f"repeat_{r}" for r in range(self.repeats)])
            for s, p, y, row in zip(self.slide_ids, self.patient_ids, self.labels, self.probs):
                w.writerow([s, p, int(y)] + [repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path) -> "PredictionTable":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:3] != ["slide_id", "patient_id", "label"]:
                raise ValueError(f"{path}: not a prediction table")
            rows = list(reader)
        return cls([r[0] for r in rows], [r[1] for r in rows], [int(r[2]) for r in rows],
                   np.array([[float(v) for v in r[3:]] for r in rows]).reshape(len(rows), len(header) - 3))


@dataclass
class MetricsReport:
    auc: float
    accuracy: float
    balanced_accuracy: float
    f1: float
    threshold: float = 0.5

    def as_dict(self):
        return asdict(self)


@dataclass
class BootstrapReport:
    mean: dict
    std: dict
    epochs: int

    def as_dict(self):
        return {"epochs": self.epochs,
                "metrics": {m: {"mean": self.mean[m], "std": self.std[m]} for m in METRICS}}


def auc(scores, labels) -> float:
    """Mann-Whitney AUC, ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    u = rankdata(scores)[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / float(n_pos * n_neg))


def confusion(scores, labels, threshold: float = 0.5):
    pred = np.asarray(scores) > threshold
    y = np.asarray(labels) == 1
    return (int((pred & y).sum()), int((~pred & ~y).sum()),
            int((pred & ~y).sum()), int((~pred & y).sum()))


def threshold_metrics(scores, labels, threshold: float = 0.5):
    """(accuracy, balanced accuracy, f1) with a positive prediction when score > threshold."""
    if len(scores) == 0:
        raise ValueError("no predictions")
    tp, tn, fp, fn = confusion(scores, labels, threshold)
    accuracy = (tp + tn) / (tp + tn + fp + fn)
    if tp + fn > 0 and tn + fp > 0:
        balanced = 0.5 * (tp / (tp + fn) + tn / (tn + fp))
    elif tp + fn > 0:
        balanced = tp / (tp + fn)
    else:
        balanced = tn / (tn + fp)
    f1 = (2 * tp) / (2 * tp + fp + fn) if 2 * tp + fp + fn > 0 else 0.0
    return accuracy, balanced, f1


def metrics_report(scores, labels, threshold: float = 0.5) -> MetricsReport:
    acc, bacc, f1 = threshold_metrics(scores, labels, threshold)
    return MetricsReport(auc(scores, labels), acc, bacc, f1, threshold)


def _patient_labels(bags) -> dict:
    out = {}
    for b in bags:
        if out.setdefault(b.patient_id, b.label) != b.label:
            raise ValueError(f"patient {b.patient_id} has slides with different labels")
    return out


def stratified_folds(bags, n_folds: int = 3, seed: int = 0) -> dict:
    """Map patient_id -> fold, dealing each class's shuffled patients round-robin.

    The deal continues across classes, so fold sizes differ by at most one and
    each class's per-fold count is within one of exact stratification.
    """
    labels = _patient_labels(bags)
    by_class = {}
    for pid in sorted(labels):
        by_class.setdefault(labels[pid], []).append(pid)
    for c in (0, 1):
        if len(by_class.get(c, [])) < n_folds:
            raise ValueError(f"class {c} has fewer than {n_folds} patients")
    rng = np.random.default_rng(derive_seed(seed, "folds"))
    folds = {}
    slot = 0
    for c in sorted(by_class):
        pids = by_class[c]
        for j in rng.permutation(len(pids)):
            folds[pids[j]] = slot % n_folds
            slot += 1
    return folds


def fold_roles(k: int, n_folds: int = 3):
    """(test, validation, train folds) for split ``k``: each fold is test once and validation once."""
    test = k % n_folds
    val = (k + 1) % n_folds
    return test, val, [f for f in range(n_folds) if f not in (test, val)]


def split_bags(bags, folds: dict, k: int, n_folds: int = 3):
    """(train, validation, test) bags for split ``k``."""
    test, val, train = fold_roles(k, n_folds)
    return ([b for b in bags if folds[b.patient_id] in train],
            [b for b in bags if folds[b.patient_id] == val],
            [b for b in bags if folds[b.patient_id] == test])


def bootstrap_epochs(table: PredictionTable, epochs: int = 100_000, seed: int = 0,
                     threshold: float = 0.5) -> np.ndarray:
    """Per-epoch metrics, shape (epochs, 4): one uniformly chosen repeat per slide per epoch."""
    if len(table.slide_ids) == 0:
        raise ValueError("empty prediction table")
    probs = np.ascontiguousarray(table.probs)
    labels = np.ascontiguousarray(table.labels, dtype=np.int8)
    S, R = probs.shape
    out = []
    for c, start in enumerate(range(0, epochs, BOOTSTRAP_CHUNK)):
        n = min(BOOTSTRAP_CHUNK, epochs - start)
        rng = np.random.default_rng(derive_seed(seed, "bootstrap", c))
        choice = np.ascontiguousarray(rng.integers(0, R, size=(n, S)), dtype=np.int64)
        out.append(kernels.bootstrap_epochs(probs, labels, choice, float(threshold)))
    return np.concatenate(out)


def _mean_std(x: np.ndarray):
    # shifting by the first value makes a constant column exactly zero-variance
    d = x - x[0]
    return float(x[0] + d.mean()), float(d.std())


def bootstrap(table: PredictionTable, epochs: int = 100_000, seed: int = 0,
              threshold: float = 0.5) -> BootstrapReport:
    per_epoch = bootstrap_epochs(table, epochs, seed, threshold)
    mean, std = {}, {}
    for j, m in enumerate(METRICS):
        mean[m], std[m] = _mean_std(per_epoch[:, j])
    return BootstrapReport(mean, std, epochs)


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
