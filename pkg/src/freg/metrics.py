"""Pixel-wise segmentation scoring: recall, precision, F-beta (beta = 0.5),
and intersection-over-union, pooled over confusion counts.

``evaluate_dataset`` reports two rows per split: the raw input masks against
the ideal masks (the detector baseline) and the regularized outputs against
the ideal masks.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nets
from . import tensor as tc
from .tensor import Tensor

F_BETA = 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def confusion(pred: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> ConfusionCounts:
    """Binarize ``pred`` at ``threshold`` (>=) and count against binary truth."""
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    tv = np.unique(t)
    if not np.all(np.isin(tv, (0.0, 1.0))):
        raise ValueError("truth mask must be binary")
    pb = p >= threshold
    tb = t >= 0.5
    tp = int(np.count_nonzero(pb & tb))
    fp = int(np.count_nonzero(pb & ~tb))
    fn = int(np.count_nonzero(~pb & tb))
    tn = int(np.count_nonzero(~pb & ~tb))
    return ConfusionCounts(tp, fp, fn, tn)


@dataclass(frozen=True)
class Scores:
    recall: float
    precision: float
    f_half: float
    iou: float
    degenerate: tuple = ()

    def row(self) -> tuple:
        return (self.recall, self.precision, self.f_half, self.iou)


def scores(c: ConfusionCounts, beta: float = F_BETA) -> Scores:
    """Empty denominators yield 0 and are flagged in ``degenerate``."""
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    recall = ratio(c.tp, c.tp + c.fn, "recall")
    precision = ratio(c.tp, c.tp + c.fp, "precision")
    b2 = beta * beta
    f = ratio((1.0 + b2) * precision * recall, b2 * precision + recall, "f_beta")
    iou = ratio(c.tp, c.tp + c.fp + c.fn, "iou")
    return Scores(recall, precision, f, iou, tuple(flags))


def f_beta(precision: float, recall: float, beta: float = F_BETA) -> float:
    b2 = beta * beta
    den = b2 * precision + recall
    return 0.0 if den == 0 else (1.0 + b2) * precision * recall / den


@dataclass
class EvaluationReport:
    split: str
    indices: np.ndarray
    baseline: list          # per-sample Scores for x vs y
    regularized: list       # per-sample Scores for G(x,z) vs y
    baseline_counts: ConfusionCounts
    regularized_counts: ConfusionCounts

    @property
    def pooled_baseline(self) -> Scores:
        return scores(self.baseline_counts)

    @property
    def pooled_regularized(self) -> Scores:
        return scores(self.regularized_counts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("row,index,recall,precision,f_half,iou\n")
        for idx, b, r in zip(self.indices, self.baseline, self.regularized):
            buf.write("input_mask,%d,%.6f,%.6f,%.6f,%.6f\n" % (idx, *b.row()))
            buf.write("regularized,%d,%.6f,%.6f,%.6f,%.6f\n" % (idx, *r.row()))
        buf.write("input_mask,pooled,%.6f,%.6f,%.6f,%.6f\n" % self.pooled_baseline.row())
        buf.write("regularized,pooled,%.6f,%.6f,%.6f,%.6f\n" % self.pooled_regularized.row())
        return buf.getvalue()

    def to_text(self) -> str:
        header = f"{'Row':<14}{'Recall':>8}{'Precision':>11}{'F0.5':>8}{'IoU':>8}"
        rows = [header, "-" * len(header)]
        for name, s in (("input mask", self.pooled_baseline),
                        ("regularized", self.pooled_regularized)):
            rows.append(f"{name:<14}{s.recall:>8.3f}{s.precision:>11.3f}"
                        f"{s.f_half:>8.3f}{s.iou:>8.3f}")
        return "\n".join(rows)


def evaluate_dataset(checkpoint, dataset, split: str = "test",
                     batch_size: int = 16) -> EvaluationReport:
    """Score input masks and regularized outputs against the ideal masks."""
    if isinstance(checkpoint, (str, Path)):
        bundle, _, _ = nets.load_checkpoint(checkpoint)
    else:
        bundle = checkpoint
    idx = dataset.indices(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} is empty")
    base_scores, reg_scores = [], []
    base_total = ConfusionCounts()
    reg_total = ConfusionCounts()
    for start in range(0, idx.size, batch_size):
        chunk = idx[start:start + batch_size]
        x = dataset.x[chunk]
        z = dataset.z[chunk]
        y = dataset.y[chunk]
        with tc.no_grad():
            g = nets.generator_forward(Tensor(x), Tensor(z), bundle, training=False).data
        for i in range(chunk.size):
            cb = confusion(x[i], y[i])
            cr = confusion(g[i], y[i])
            base_scores.append(scores(cb))
            reg_scores.append(scores(cr))
            base_total = base_total + cb
            reg_total = reg_total + cr
    return EvaluationReport(split, idx, base_scores, reg_scores, base_total, reg_total)
