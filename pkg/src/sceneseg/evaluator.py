"""Scoring a K-cluster map against a reference class map.

Clusters have no names, so each one is named after the reference class it
overlaps most (several clusters may share a class). Scores are per-class F1
and IoU on the collapsed class confusion, macro-averaged over the classes
that actually occur in the reference.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InputError

IGNORE = -1
NULL_CLASS = -1


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K clusters, M classes)
    ignored: int = 0

    def __add__(self, other):
        if self.counts.shape != other.counts.shape:
            raise InputError(f"cannot pool confusions of shape {self.counts.shape} and {other.counts.shape}")
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)

    @property
    def total(self):
        return int(self.counts.sum()) + self.ignored


@dataclass
class MetricsReport:
    class_names: list
    f1: np.ndarray
    iou: np.ndarray
    present: np.ndarray  # bool, class occurs in the reference
    macro_f1: float
    macro_iou: float
    mapping: dict = None
    ignored: int = 0
    per_tile: list = field(default_factory=list)

    def to_json(self):
        used = [n for n, p in zip(self.class_names, self.present) if p]
        out = {
            "per_class": {n: {"f1": float(f), "iou": float(i)}
                          for n, f, i in zip(self.class_names, self.f1, self.iou)},
            "macro_f1": float(self.macro_f1),
            "macro_iou": float(self.macro_iou),
            "averaging": "macro",
            "classes": used,
            "ignored": int(self.ignored),
        }
        if self.mapping is not None:
            out["mapping"] = {str(k): (self.class_names[v] if v != NULL_CLASS else None)
                              for k, v in self.mapping.items()}
        if self.per_tile:
            out["per_tile"] = [{"macro_f1": float(t.macro_f1), "macro_iou": float(t.macro_iou)}
                               for t in self.per_tile]
        return out

    def dumps(self):
        return json.dumps(self.to_json(), indent=2)


def _labels(x):
    return x.labels if hasattr(x, "labels") else np.asarray(x)


def confusion(pred, ref, K=None, M=None):
    """Count pixels per (cluster, reference class); ``IGNORE`` refs are skipped."""
    p = _labels(pred)
    r = _labels(ref)
    if p.shape != r.shape:
        raise InputError(f"prediction {p.shape} and reference {r.shape} differ in size")
    K = K or getattr(pred, "K", None) or int(p.max()) + 1
    if M is None:
        M = int(r.max()) + 1 if r.size and r.max() >= 0 else 1
    keep = r != IGNORE
    idx = p[keep].astype(np.int64) * M + r[keep].astype(np.int64)
    counts = np.bincount(idx, minlength=K * M).reshape(K, M)
    return ConfusionMatrix(counts, int(r.size - keep.sum()))


def majority_map(cm):
    """Cluster -> class with the largest overlap; ties go to the lower class."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    best = counts.argmax(axis=1)
    empty = counts.sum(axis=1) == 0
    return {k: (NULL_CLASS if empty[k] else int(best[k])) for k in range(counts.shape[0])}


def class_confusion(cm, mapping):
    """Collapse the (K, M) cluster confusion into (M, M) ``[pred, ref]``."""
    K, M = cm.counts.shape
    out = np.zeros((M, M), dtype=np.int64)
    for k in range(K):
        row = cm.counts[k]
        if not row.any():
            continue
        cls = mapping.get(k, NULL_CLASS)
        if cls == NULL_CLASS or cls is None:
            raise ContractError(f"cluster {k} holds pixels but has no class")
        out[cls] += row
    return out


def scores(cc):
    """Per-class F1 and IoU of an (M, M) ``[pred, ref]`` confusion."""
    tp = np.diag(cc).astype(np.float64)
    fp = cc.sum(axis=1) - tp
    fn = cc.sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(2 * tp + fp + fn > 0, 2 * tp / (2 * tp + fp + fn), 0.0)
        iou = np.where(tp + fp + fn > 0, tp / (tp + fp + fn), 0.0)
    return f1, iou


def metrics(cm, mapping, class_names=None):
    """F1/IoU per class and their macro means over classes in the reference."""
    M = cm.counts.shape[1]
    names = list(class_names) if class_names is not None else [str(m) for m in range(M)]
    if len(names) < M:
        raise InputError(f"{M} reference classes but only {len(names)} names")
    names = names[:M]
    cc = class_confusion(cm, mapping)
    f1, iou = scores(cc)
    present = cc.sum(axis=0) > 0
    if present.any():
        macro_f1, macro_iou = float(f1[present].mean()), float(iou[present].mean())
    else:
        macro_f1 = macro_iou = 0.0
    return MetricsReport(names, f1, iou, present, macro_f1, macro_iou, dict(mapping), cm.ignored)


def evaluate(preds, refs, K, class_names):
    """Pool the confusions of several tiles, name clusters, score.

    Per-tile reports (each with the pooled mapping) ride along in
    ``per_tile``.
    """
    if len(preds) != len(refs) or not preds:
        raise InputError("need matching, non-empty lists of predictions and references")
    M = len(class_names)
    cms = [confusion(p, r, K, M) for p, r in zip(preds, refs)]
    pooled = cms[0]
    for cm in cms[1:]:
        pooled = pooled + cm
    if pooled.counts.sum() == 0:
        raise InputError("every pixel is ignored; nothing to score")
    mapping = majority_map(pooled)
    report = metrics(pooled, mapping, class_names)
    if len(cms) > 1:
        report.per_tile = [metrics(cm, mapping, class_names) for cm in cms]
    return report


def binarize(labels, building_class, mapping=None):
    """1 where the (mapped) class is ``building_class``, else 0."""
    labels = _labels(labels)
    if mapping is not None:
        lut = np.full(max(mapping) + 1, NULL_CLASS, dtype=np.int64)
        for k, v in mapping.items():
            lut[k] = NULL_CLASS if v is None else v
        labels = lut[labels]
    return (labels == building_class).astype(np.uint8)


def average_runs(reports):
    """Field-wise mean of reports sharing one class list; drops the mapping."""
    if not reports:
        raise InputError("no reports to average")
    names = reports[0].class_names
    if any(r.class_names != names for r in reports):
        raise InputError("reports cover different class sets")
    return MetricsReport(
        names,
        np.mean([r.f1 for r in reports], axis=0),
        np.mean([r.iou for r in reports], axis=0),
        np.any([r.present for r in reports], axis=0),
        float(np.mean([r.macro_f1 for r in reports])),
        float(np.mean([r.macro_iou for r in reports])),
        None,
        int(round(np.mean([r.ignored for r in reports]))),
    )
