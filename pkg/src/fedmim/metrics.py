"""Evaluation metrics, seed aggregation and report files."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

DICE_EPS = 1e-5
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 1.0
CLASSIFICATION_KINDS = ("multilabel", "multiclass", "binary", "severity")
SEGMENTATION_KINDS = ("seg-disc", "seg-vessel")
REPORT_COLUMNS = ("method", "split", "task", "metric", "mean", "std", "n_seeds")


def _hard(pred: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred)
    if pred.dtype.kind == "f":
        return (pred >= 0.5).astype(np.int64)
    return pred.astype(np.int64)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    # zero predicted positives -> precision 0; zero support -> recall 0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
    return precision, recall, f1


def classification_metrics(predictions, labels, kind: str) -> dict[str, float]:
    """Accuracy, macro precision, macro recall and macro F1.

    ``predictions`` are hard labels, or sigmoid scores (thresholded at 0.5)
    for binary/multilabel, or logits ``[N, C]`` (argmax) for multiclass and
    severity. Multilabel accuracy is element-wise; binary precision/F1 are
    for the positive class; otherwise macros average over classes present in
    either predictions or labels.
    """
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape[0] == 0:
        raise ValueError("classification_metrics: empty input")
    if kind in ("multiclass", "severity"):
        if predictions.ndim == 2:
            predictions = predictions.argmax(axis=1)
        pred = predictions.astype(np.int64)
        true = labels.astype(np.int64)
    elif kind in ("binary", "multilabel"):
        pred = _hard(predictions)
        true = labels.astype(np.int64)
        if kind == "binary":
            pred, true = pred.reshape(-1), true.reshape(-1)
    else:
        raise ValueError(f"classification_metrics: unsupported kind {kind!r}")
    if pred.shape != true.shape:
        raise ValueError(f"classification_metrics: predictions {pred.shape} vs labels {true.shape}")

    accuracy = float((pred == true).mean())
    if kind == "binary":
        tp = int(((pred == 1) & (true == 1)).sum())
        fp = int(((pred == 1) & (true == 0)).sum())
        fn = int(((pred == 0) & (true == 1)).sum())
        p, r, f = _prf(tp, fp, fn)
        return {"accuracy": accuracy, "precision": p, "recall": r, "f1": f}

    if kind == "multilabel":
        per = []
        for j in range(true.shape[1]):
            pj, tj = pred[:, j], true[:, j]
            if not (pj.any() or tj.any()):
                continue
            tp = int(((pj == 1) & (tj == 1)).sum())
            per.append(_prf(tp, int(((pj == 1) & (tj == 0)).sum()), int(((pj == 0) & (tj == 1)).sum())))
    else:
        per = []
        for c in np.union1d(pred, true):
            tp = int(((pred == c) & (true == c)).sum())
            per.append(_prf(tp, int(((pred == c) & (true != c)).sum()), int(((pred != c) & (true == c)).sum())))
    if not per:
        # every label negative in both: nothing to get wrong
        return {"accuracy": accuracy, "precision": 1.0, "recall": 1.0, "f1": 1.0}
    arr = np.array(per)
    return {"accuracy": accuracy, "precision": float(arr[:, 0].mean()),
            "recall": float(arr[:, 1].mean()), "f1": float(arr[:, 2].mean())}


def confusion_matrix(pred, true, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return cm


def _check_pair(pred, mask, name):
    pred = np.asarray(pred, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.shape != mask.shape:
        raise ValueError(f"{name}: shape mismatch {pred.shape} vs {mask.shape}")
    return pred, mask


def dice_loss(pred, mask, eps: float = DICE_EPS) -> float:
    """``1 - (2 * sum(p * m) + eps) / (sum(p) + sum(m) + eps)``."""
    pred, mask = _check_pair(pred, mask, "dice_loss")
    return float(1.0 - (2.0 * (pred * mask).sum() + eps) / (pred.sum() + mask.sum() + eps))


def focal_term(pred, mask, gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA) -> float:
    pred, mask = _check_pair(pred, mask, "focal_term")
    p_t = np.clip(np.where(mask > 0.5, pred, 1.0 - pred), 1e-7, 1.0)
    return float(np.mean(-alpha * (1.0 - p_t) ** gamma * np.log(p_t)))


def dice_focal(pred, mask, gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA, eps: float = DICE_EPS) -> float:
    return dice_loss(pred, mask, eps) + focal_term(pred, mask, gamma, alpha)


def segmentation_metrics(probs, masks, eps: float = DICE_EPS) -> dict[str, float]:
    """Per-image Dice loss / Dice-focal averaged over images, plus pixel accuracy."""
    probs = np.asarray(probs, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if probs.shape != masks.shape or probs.shape[0] == 0:
        raise ValueError(f"segmentation_metrics: shapes {probs.shape} vs {masks.shape}")
    dl = [dice_loss(p, m, eps) for p, m in zip(probs, masks)]
    df = [dice_focal(p, m, eps=eps) for p, m in zip(probs, masks)]
    acc = float(((probs >= 0.5) == (masks >= 0.5)).mean())
    return {"accuracy": acc, "dice_loss": float(np.mean(dl)), "dice_focal": float(np.mean(df))}


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    task: str
    method: str = ""
    split: str = ""
    metrics: dict = field(default_factory=dict)  # name -> (mean, std)
    n_samples: int = 0
    n_seeds: int = 1
    per_seed: dict = field(default_factory=dict)  # name -> [value per seed]
    confusion: list | None = None
    overlap: list | None = None  # per image (sum p*m, sum p, sum m)

    def mean(self, name: str) -> float:
        return self.metrics[name][0]


def summarize(task: str, runs: list[dict], method: str = "", split: str = "", n_samples: int = 0) -> EvalReport:
    """Combine per-seed metric dicts into mean and sample standard deviation."""
    if not runs:
        raise ValueError("summarize: no runs")
    names = sorted(runs[0])
    per_seed = {n: [float(r[n]) for r in runs] for n in names}
    metrics = {}
    for n, vals in per_seed.items():
        mean = math.fsum(vals) / len(vals)
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)) if len(vals) > 1 else 0.0
        metrics[n] = (mean, std)
    return EvalReport(task, method, split, metrics, n_samples, len(runs), per_seed)


def report_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        for name in sorted(r.metrics):
            mean, std = r.metrics[name]
            w.writerow([r.method, r.split, r.task, name, f"{mean:.6f}", f"{std:.6f}", r.n_seeds])
    return buf.getvalue()


def emit_report(reports: list[EvalReport], destination, curves: dict | None = None) -> list[str]:
    """Write ``destination`` as CSV and one SVG per entry of ``curves``; returns written paths."""
    parent = os.path.dirname(os.path.abspath(destination))
    if not os.path.isdir(parent) or not os.access(parent, os.W_OK):
        raise OSError(f"emit_report: destination directory {parent} is not writable")
    with open(destination, "w", newline="") as fh:
        fh.write(report_csv(reports))
    written = [str(destination)]
    for name, series in sorted((curves or {}).items()):
        path = os.path.join(os.path.dirname(str(destination)), f"{name}.svg")
        with open(path, "w") as fh:
            fh.write(line_chart_svg(series, title=name))
        written.append(path)
    return written


TABLE_METHODS = ("Local Supervision", "Centralized SSL", "SSL-FL Split 1", "SSL-FL Split 2")


def comparison_csv(reports: list[EvalReport]) -> str:
    """Task-by-method table with ``mean ± std`` cells in percent, one decimal."""
    order = {m: i for i, m in enumerate(TABLE_METHODS)}
    rows = sorted(reports, key=lambda r: (r.task, order.get(r.method, len(order)), r.method))
    names = sorted({n for r in reports for n in r.metrics})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "method", "n_seeds", *names])
    for r in rows:
        cells = []
        for n in names:
            if n in r.metrics:
                mean, std = r.metrics[n]
                cells.append(f"{100 * mean:.1f} ± {100 * std:.1f}")
            else:
                cells.append("")
        w.writerow([r.task, r.method, r.n_seeds, *cells])
    return buf.getvalue()


def line_chart_svg(series: dict, title: str = "", width: int = 480, height: int = 300) -> str:
    """Minimal static SVG line chart; ``series`` maps label -> list of y values."""
    pad = 40
    ys = [y for vals in series.values() for y in vals]
    lo, hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    n = max((len(v) for v in series.values()), default=1)
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")

    def xy(i, y):
        x = pad + (width - 2 * pad) * (i / max(n - 1, 1))
        return x, height - pad - (height - 2 * pad) * (y - lo) / (hi - lo)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end" font-size="10">{hi:.4g}</text>',
           f'<text x="{pad - 4}" y="{height - pad}" text-anchor="end" font-size="10">{lo:.4g}</text>']
    for k, (label, vals) in enumerate(sorted(series.items())):
        color = colors[k % len(colors)]
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(i, v) for i, v in enumerate(vals)))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{width - pad + 2}" y="{pad + 14 * k}" font-size="10" fill="{color}">{_esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
