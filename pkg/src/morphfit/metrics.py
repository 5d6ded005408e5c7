"""Evaluation statistics: affect regression, classification, parameter and geometry errors."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


class DegenerateInputError(ValueError):
    pass


def _vectors(x, y, min_len=1):
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch {x.size} vs {y.size}")
    if x.size < min_len:
        raise ValueError(f"need at least {min_len} samples, got {x.size}")
    return x, y


def _moments(x, y):
    x, y = _vectors(x, y, min_len=2)
    mx, my = x.mean(), y.mean()
    vx = np.mean((x - mx) ** 2)
    vy = np.mean((y - my) ** 2)
    if vx == 0 or vy == 0:
        raise DegenerateInputError("zero variance input")
    cov = np.mean((x - mx) * (y - my))
    return mx, my, vx, vy, cov


def pcc(x, y) -> float:
    """Pearson correlation with population moments."""
    _, _, vx, vy, cov = _moments(x, y)
    return float(cov / math.sqrt(vx * vy))


def ccc(x, y) -> float:
    """Concordance correlation coefficient with population moments."""
    mx, my, vx, vy, cov = _moments(x, y)
    return float(2 * cov / (vx + vy + (mx - my) ** 2))


def rmse(x, y) -> float:
    x, y = _vectors(x, y)
    return float(math.sqrt(np.mean((x - y) ** 2)))


def sagr(x, y) -> float:
    """Sign agreement rate; zero counts as positive."""
    x, y = _vectors(x, y)
    return float(np.mean((x >= 0) == (y >= 0)))


@dataclass
class ClassMetrics:
    accuracy: float
    precision_macro: float
    f1_macro: float
    per_class_accuracy: np.ndarray  # recall per class, NaN where the class has no samples
    excluded: list[int]


def classification_metrics(pred, gt, n_classes: int) -> ClassMetrics:
    """Accuracy plus macro precision/F1 over the classes present in ``gt``.

    A class that is never predicted has precision 0.
    """
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.size == 0:
        raise ValueError("empty input")
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch {pred.size} vs {gt.size}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"{name} labels outside [0, {n_classes})")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (gt, pred), 1)
    tp = np.diag(conf).astype(float)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    present = support > 0
    recall = np.full(n_classes, np.nan)
    recall[present] = tp[present] / support[present]
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 0.0)
    denom = precision + np.nan_to_num(recall)
    f1 = np.where(denom > 0, 2 * precision * np.nan_to_num(recall) / np.where(denom > 0, denom, 1), 0.0)
    return ClassMetrics(
        accuracy=float(tp.sum() / pred.size),
        precision_macro=float(precision[present].mean()),
        f1_macro=float(f1[present].mean()),
        per_class_accuracy=recall,
        excluded=[int(c) for c in np.flatnonzero(~present)],
    )


PARAM_GROUPS = {"expr_jaw": ("psi_exp", "theta_jaw"), "beta": ("beta",)}


def param_mse(pred, gt, group: str = "expr_jaw") -> float:
    """Mean over samples of the per-dimension squared error of a parameter group."""
    if group not in PARAM_GROUPS:
        raise ValueError(f"unknown group {group!r}; choose from {sorted(PARAM_GROUPS)}")
    if len(pred) != len(gt) or not pred:
        raise ValueError("pred and gt must be equal-length, non-empty lists")
    errs = []
    for p, g in zip(pred, gt):
        a = np.concatenate([np.asarray(getattr(p, f), dtype=float) for f in PARAM_GROUPS[group]])
        b = np.concatenate([np.asarray(getattr(g, f), dtype=float) for f in PARAM_GROUPS[group]])
        if a.shape != b.shape:
            raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
        errs.append(np.mean((a - b) ** 2))
    return float(np.mean(errs))


@dataclass
class GeometryErrors:
    keypoint_mean: float
    keypoint_std: float
    vertex_mean: float
    vertex_std: float
    keypoint_per_sample: np.ndarray
    vertex_per_sample: np.ndarray


def geometry_errors(pred_meshes, ref_meshes, asset) -> GeometryErrors:
    """Mean Euclidean keypoint and vertex error per sample, summarised as mean and std."""
    from .model import embed_keypoints

    if len(pred_meshes) != len(ref_meshes) or not pred_meshes:
        raise ValueError("pred and ref must be equal-length, non-empty lists")
    kp, vx = [], []
    for p, r in zip(pred_meshes, ref_meshes):
        p = np.asarray(p, dtype=float)
        r = np.asarray(r, dtype=float)
        if p.shape != r.shape or p.shape != (asset.n_verts, 3):
            raise ValueError(f"topology mismatch: {p.shape} vs {r.shape}")
        vx.append(np.linalg.norm(p - r, axis=1).mean())
        kp.append(np.linalg.norm(embed_keypoints(asset, p) - embed_keypoints(asset, r), axis=1).mean())
    kp, vx = np.array(kp), np.array(vx)
    return GeometryErrors(float(kp.mean()), float(kp.std()), float(vx.mean()), float(vx.std()), kp, vx)


def ced_auc(errors, tau: float) -> float:
    """Area under the empirical error CDF on [0, tau], divided by tau.

    Each error e contributes ``max(0, tau - e)`` to the integral of its step.
    """
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("empty error list")
    if not tau > 0:
        raise ValueError("tau must be positive")
    if np.any(e < 0):
        raise ValueError("errors must be non-negative")
    return float(np.mean(np.maximum(0.0, tau - e)) / tau)


def kfold_split(labels, k: int = 5, seed: int = 0, class_balanced_val: bool = False):
    """Stratified k-fold split over integer class labels.

    Each class is shuffled and dealt round-robin onto the folds, continuing the
    deal where the previous class stopped so fold sizes stay within one.  With
    ``class_balanced_val`` every validation fold is downsampled to equal
    per-class counts; the dropped samples join that fold's training set.
    Returns a list of ``(train_idx, val_idx)`` sorted index arrays.
    """
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if k < 2:
        raise ValueError("k must be >= 2")
    if labels.size < k:
        raise ValueError(f"{labels.size} samples cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    if class_balanced_val and counts.min() < k:
        c = int(classes[np.argmin(counts)])
        raise ValueError(f"class {c} has {counts.min()} samples, fewer than k={k}")
    fold_of = np.empty(labels.size, dtype=np.int64)
    offset = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        fold_of[idx] = (offset + np.arange(idx.size)) % k
        offset = (offset + idx.size) % k
    out = []
    for f in range(k):
        val = np.flatnonzero(fold_of == f)
        if class_balanced_val:
            per = min(int(np.sum(labels[val] == c)) for c in classes)
            keep = [rng.permutation(val[labels[val] == c])[:per] for c in classes]
            val = np.sort(np.concatenate(keep))
        train = np.setdiff1d(np.arange(labels.size), val)
        out.append((train, val))
    return out


@dataclass
class MetricReport:
    scalars: dict = field(default_factory=dict)
    per_class: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"scalars": self.scalars, "per_class": self.per_class, "notes": self.notes}

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True, allow_nan=False)

    def to_table(self) -> str:
        rows = [(k, _fmt(v)) for k, v in sorted(self.scalars.items())]
        for name, vals in sorted(self.per_class.items()):
            rows += [(f"{name}[{i}]", _fmt(v)) for i, v in enumerate(vals)]
        if not rows:
            return ""
        w = max(len(r[0]) for r in rows)
        lines = [f"{'metric'.ljust(w)}  value", f"{'-' * w}  {'-' * 12}"]
        lines += [f"{k.ljust(w)}  {v}" for k, v in rows]
        lines += [f"# {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return "n/a"
    return f"{v:.6f}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return None if not math.isfinite(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _safe(fn, *args):
    try:
        return fn(*args)
    except DegenerateInputError:
        return None


def affect_report(va_pred, va_gt, cls_pred=None, cls_gt=None, n_classes=7) -> MetricReport:
    """VA regression metrics for both axes plus optional classification metrics."""
    va_pred = np.asarray(va_pred, dtype=float).reshape(-1, 2)
    va_gt = np.asarray(va_gt, dtype=float).reshape(-1, 2)
    rep = MetricReport()
    for j, axis in enumerate("va"):
        x, y = va_pred[:, j], va_gt[:, j]
        for name, fn in (("pcc", pcc), ("ccc", ccc)):
            val = _safe(fn, x, y)
            rep.scalars[f"{name}_{axis}"] = val
            if val is None:
                rep.notes.append(f"{name}_{axis} undefined: zero variance")
        rep.scalars[f"rmse_{axis}"] = rmse(x, y)
        rep.scalars[f"sagr_{axis}"] = sagr(x, y)
    if cls_pred is not None:
        cm = classification_metrics(cls_pred, cls_gt, n_classes)
        rep.scalars.update(accuracy=cm.accuracy, precision_macro=cm.precision_macro, f1_macro=cm.f1_macro)
        rep.per_class["accuracy"] = [None if math.isnan(v) else float(v) for v in cm.per_class_accuracy]
        if cm.excluded:
            rep.notes.append(f"classes absent from ground truth, excluded from macro averages: {cm.excluded}")
    return rep
