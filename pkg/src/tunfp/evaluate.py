"""Tunnel-only inference and evaluation.

Classification at deployment time sees only the tunnel side: a flow's
fingerprint is the masked mean of its tunnel app-view encoding, and the
prediction is the argmax of the shared app head over that fingerprint.
Everything here is deterministic: evaluating the same model on the same
flows twice produces byte-identical reports.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .flows import FlowSequence, ParallelFlowPair
from .model import DualBranchNet, batch_tensors

EVAL_BATCH = 256  # fixed so that repeated evaluations chunk identically


@dataclass(frozen=True)
class ClassMetrics:
    label: int
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: tuple[ClassMetrics, ...]
    confusion: tuple[tuple[int, ...], ...]  # rows: true label, cols: predicted
    n: int

    def summary_lines(self) -> list[str]:
        lines = [
            f"n {self.n}",
            f"accuracy {self.accuracy!r}",
            f"macro_precision {self.macro_precision!r}",
            f"macro_recall {self.macro_recall!r}",
            f"macro_f1 {self.macro_f1!r}",
        ]
        for cm in self.per_class:
            lines.append(
                f"class {cm.label} precision {cm.precision!r} recall "
                f"{cm.recall!r} f1 {cm.f1!r} support {cm.support}"
            )
        return lines


def compute_metrics(y_true: Sequence[int], y_pred: Sequence[int],
                    num_classes: int) -> MetricsReport:
    """Accuracy and macro precision/recall/F1 from the confusion matrix.

    Zero-support or zero-prediction classes contribute 0 to the macro
    averages (which divide by the full class count).
    """
    if len(y_true) != len(y_pred):
        raise ValueError("prediction/label length mismatch")
    if len(y_true) == 0:
        raise ValueError("cannot score an empty set")
    conf = [[0] * num_classes for _ in range(num_classes)]
    for t, p in zip(y_true, y_pred):
        if not (0 <= t < num_classes and 0 <= p < num_classes):
            raise ValueError(f"label outside [0, {num_classes}): true={t} pred={p}")
        conf[t][p] += 1
    per_class = []
    for c in range(num_classes):
        tp = conf[c][c]
        fp = sum(conf[r][c] for r in range(num_classes)) - tp
        fn = sum(conf[c]) - tp
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class.append(ClassMetrics(c, precision, recall, f1, tp + fn))
    correct = sum(conf[c][c] for c in range(num_classes))
    return MetricsReport(
        accuracy=correct / len(y_true),
        macro_precision=sum(m.precision for m in per_class) / num_classes,
        macro_recall=sum(m.recall for m in per_class) / num_classes,
        macro_f1=sum(m.f1 for m in per_class) / num_classes,
        per_class=tuple(per_class),
        confusion=tuple(tuple(row) for row in conf),
        n=len(y_true),
    )


# ---------------------------------------------------------------------------
# prediction

@dataclass(frozen=True)
class Fingerprints:
    """Fingerprint matrix (n_flows, 2H) with aligned predictions."""
    vectors: np.ndarray
    predictions: np.ndarray


def fingerprint_flows(model: DualBranchNet, flows: Sequence[FlowSequence],
                      batch: int = EVAL_BATCH) -> Fingerprints:
    """Run the tunnel-only path over flows in fixed-size chunks."""
    vecs, preds = [], []
    model.eval()
    with torch.no_grad():
        for lo in range(0, len(flows), batch):
            chunk = list(flows[lo: lo + batch])
            tokens, lengths = batch_tensors(chunk, max_len=model.cfg.n)
            pooled, logits = model.encode_tun(tokens, lengths)
            vecs.append(pooled.numpy().copy())
            preds.append(logits.argmax(dim=1).numpy().copy())
    return Fingerprints(np.concatenate(vecs), np.concatenate(preds))


def predict(model: DualBranchNet, flows: Sequence[FlowSequence]) -> np.ndarray:
    return fingerprint_flows(model, flows).predictions


def evaluate_pairs(model: DualBranchNet, pairs: Sequence[ParallelFlowPair]) -> MetricsReport:
    """Score tunnel-side predictions of labeled pairs."""
    y_true = [p.label for p in pairs]
    if any(y is None for y in y_true):
        raise ValueError("evaluation needs labeled pairs")
    y_pred = predict(model, [p.tun for p in pairs])
    return compute_metrics(y_true, y_pred.tolist(), model.cfg.C)


# ---------------------------------------------------------------------------
# per-length-bucket breakdown

DEFAULT_BUCKET_EDGES = (10, 20, 30, 50, 100, 200)


@dataclass(frozen=True)
class BucketResult:
    lo: int
    hi: Optional[int]  # None = open-ended
    support: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.support

    @property
    def span(self) -> str:
        return f"[{self.lo},{self.hi})" if self.hi is not None else f"[{self.lo},inf)"


def bucketed_eval(model: DualBranchNet, pairs: Sequence[ParallelFlowPair],
                  edges: Sequence[int] = DEFAULT_BUCKET_EDGES) -> list[BucketResult]:
    """Accuracy per tunnel-length bucket. Buckets are [e_i, e_{i+1}) with a
    leading [1, e_0) and trailing open bucket; empty buckets are omitted.
    The per-bucket counts partition the overall evaluation exactly.
    """
    if sorted(set(edges)) != list(edges):
        raise ValueError("bucket edges must be strictly increasing")
    y_pred = predict(model, [p.tun for p in pairs])
    bounds = [1, *edges, None]
    stats = {i: [0, 0] for i in range(len(bounds) - 1)}
    for pair, pred in zip(pairs, y_pred):
        L = pair.tun.true_len
        for i in range(len(bounds) - 1):
            hi = bounds[i + 1]
            if L >= bounds[i] and (hi is None or L < hi):
                stats[i][0] += 1
                stats[i][1] += int(pred == pair.label)
                break
    return [
        BucketResult(lo=bounds[i], hi=bounds[i + 1], support=s, correct=c)
        for i, (s, c) in stats.items() if s > 0
    ]


# ---------------------------------------------------------------------------
# fingerprint export

def export_fingerprints(model: DualBranchNet, pairs: Sequence[ParallelFlowPair],
                        path: str | Path) -> int:
    """Write one CSV row per pair: label, prediction, then the fingerprint
    coordinates fp_0..fp_{2H-1}."""
    fps = fingerprint_flows(model, [p.tun for p in pairs])
    width = fps.vectors.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "prediction", *(f"fp_{i}" for i in range(width))])
        for pair, pred, vec in zip(pairs, fps.predictions, fps.vectors):
            label = "" if pair.label is None else pair.label
            writer.writerow([label, int(pred), *(repr(float(v)) for v in vec)])
    return len(pairs)
