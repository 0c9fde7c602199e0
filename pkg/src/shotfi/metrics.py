"""Permutation-invariant multi-user metrics and standard single-user metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import f1_score

from .csi import PaddedLabelVector
from .matching import build_cost_matrix, hungarian, match_batch


def align(pred_probs, truth) -> np.ndarray:
    """Hungarian permutation: predicted slot m is compared with truth slot perm[m]."""
    perm, _ = hungarian(build_cost_matrix(pred_probs, truth))
    return perm


def aligned_truth(probs: np.ndarray, truths: np.ndarray) -> np.ndarray:
    perms = match_batch(np.asarray(probs, dtype=np.float64), np.asarray(truths))
    return np.take_along_axis(np.asarray(truths), perms, axis=1)


def slot_accuracy(pred: np.ndarray, truth_aligned: np.ndarray) -> float:
    return float(np.mean(pred == truth_aligned))


def exact_match(pred: np.ndarray, truth_aligned: np.ndarray) -> float:
    return float(np.mean(np.all(pred == truth_aligned, axis=1)))


def activity_f1(pred: np.ndarray, truth_aligned: np.ndarray, K: int) -> tuple[float, np.ndarray]:
    """Macro-F1 over activities 0..K-1 on slots whose aligned truth is occupied.

    A class with no support and no predictions scores 0 and still counts in the mean.
    """
    occupied = truth_aligned != K
    per = f1_score(truth_aligned[occupied], pred[occupied], labels=np.arange(K),
                   average=None, zero_division=0)
    return float(per.mean()), per


def occupancy_metrics(pred: np.ndarray, truth: np.ndarray, K: int) -> tuple[float, float]:
    o_hat = np.sum(pred != K, axis=1)
    o = np.sum(truth != K, axis=1)
    return float(np.mean(np.abs(o_hat - o))), float(np.mean(o_hat == o))


@dataclass
class MetricReport:
    slot_acc: float
    activity_f1_macro: float
    exact_match: float
    occ_mae: float
    occ_exact: float
    per_class_f1: dict = field(default_factory=dict)
    n_samples: int = 0
    kind: str = "multiuser"

    @property
    def headline(self) -> float:
        return self.slot_acc

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def per_class_csv(self, path) -> None:
        write_per_class_csv(path, self.per_class_f1)


@dataclass
class SingleUserReport:
    accuracy: float
    macro_f1: float
    per_class_f1: dict = field(default_factory=dict)
    n_samples: int = 0
    kind: str = "singleuser"

    @property
    def headline(self) -> float:
        return self.accuracy

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def per_class_csv(self, path) -> None:
        write_per_class_csv(path, self.per_class_f1)


def write_per_class_csv(path, per_class: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "f1"])
        for c, v in per_class.items():
            w.writerow([c, f"{v:.6f}"])


def multiuser_report(probs, truths) -> MetricReport:
    """All multi-user metrics. probs (N, M, K+1); truths (N, M) or PaddedLabelVectors."""
    probs = np.asarray(probs, dtype=np.float64)
    if len(truths) and isinstance(truths[0], PaddedLabelVector):
        truths = np.stack([t.as_array() for t in truths])
    truths = np.asarray(truths, dtype=np.int64)
    K = probs.shape[-1] - 1
    pred = probs.argmax(axis=-1)
    ta = aligned_truth(probs, truths)
    f1_macro, per = activity_f1(pred, ta, K)
    mae, occ_ex = occupancy_metrics(pred, truths, K)
    return MetricReport(slot_accuracy(pred, ta), f1_macro, exact_match(pred, ta), mae, occ_ex,
                        {int(c): float(v) for c, v in enumerate(per)}, len(probs))


def single_user_metrics(pred_classes, truths, K: int) -> tuple[float, np.ndarray, float]:
    pred = np.asarray(pred_classes)
    truth = np.asarray(truths)
    per = f1_score(truth, pred, labels=np.arange(K), average=None, zero_division=0)
    return float(np.mean(pred == truth)), per, float(per.mean())


def singleuser_report(probs, truths) -> SingleUserReport:
    probs = np.asarray(probs)
    acc, per, macro = single_user_metrics(probs.argmax(axis=-1), truths, probs.shape[-1])
    return SingleUserReport(acc, macro, {int(c): float(v) for c, v in enumerate(per)}, len(probs))
