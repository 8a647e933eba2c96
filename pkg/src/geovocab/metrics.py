"""Segmentation evaluation: confusion matrices, per-class IoU and recall,
overall mIoU/OA, per-image category accuracy, and report rendering.

Matrix convention: ``counts[g][p]`` counts pixels with ground truth g
predicted as p.  Ground-truth sentinel pixels are excluded and tallied in
``ignored_pixels``; a sentinel in a prediction is an error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimMismatch,
    EmptyGroundTruthSet,
    LabelOutOfRange,
    NoDefinedClasses,
    SentinelInPrediction,
)
from .model import IGNORE_LABEL, CategoryPool, LabelRaster


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    pool: CategoryPool
    counts: np.ndarray = field(repr=False)
    ignored_pixels: int = 0

    def __post_init__(self) -> None:
        n = len(self.pool)
        if self.counts.shape != (n, n):
            raise ValueError(
                f"counts shape {self.counts.shape} does not match pool size {n}"
            )
        if self.counts.dtype != np.int64:
            raise ValueError(f"counts dtype must be int64, got {self.counts.dtype}")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")
        self.counts.setflags(write=False)


def empty_matrix(pool: CategoryPool) -> ConfusionMatrix:
    n = len(pool)
    return ConfusionMatrix(pool=pool, counts=np.zeros((n, n), dtype=np.int64))


def accumulate(
    cm: ConfusionMatrix, pred: LabelRaster, gt: LabelRaster
) -> ConfusionMatrix:
    """Return a new matrix with one (pred, gt) raster pair tallied in."""
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise DimMismatch(
            f"prediction {pred.height}x{pred.width} does not match "
            f"ground truth {gt.height}x{gt.width}"
        )
    n = len(cm.pool)
    pred_arr = pred.labels
    gt_arr = gt.labels

    sentinel_pred = pred_arr == IGNORE_LABEL
    if sentinel_pred.any():
        flat = int(np.flatnonzero(sentinel_pred.ravel())[0])
        position = tuple(int(i) for i in np.unravel_index(flat, pred_arr.shape))
        raise SentinelInPrediction(position)
    for name, arr in (("prediction", pred_arr), ("ground truth", gt_arr)):
        bad = (arr >= n) & (arr != IGNORE_LABEL)
        if bad.any():
            flat = int(np.flatnonzero(bad.ravel())[0])
            position = tuple(int(i) for i in np.unravel_index(flat, arr.shape))
            raise LabelOutOfRange(int(arr.ravel()[flat]), position)

    valid = gt_arr != IGNORE_LABEL
    combined = gt_arr[valid].astype(np.int64) * n + pred_arr[valid].astype(np.int64)
    tally = np.bincount(combined, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(
        pool=cm.pool,
        counts=cm.counts + tally,
        ignored_pixels=cm.ignored_pixels + int((~valid).sum()),
    )


def merge(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    """Elementwise sum of two matrices over the same pool."""
    if a.pool.names != b.pool.names:
        raise ValueError("cannot merge matrices over different pools")
    return ConfusionMatrix(
        pool=a.pool,
        counts=a.counts + b.counts,
        ignored_pixels=a.ignored_pixels + b.ignored_pixels,
    )


def per_class_iou(cm: ConfusionMatrix) -> list[tuple[str, float | None]]:
    """Intersection over union per class; None when the class never occurs."""
    tp = np.diag(cm.counts)
    fn_plus_tp = cm.counts.sum(axis=1)
    fp_plus_tp = cm.counts.sum(axis=0)
    out: list[tuple[str, float | None]] = []
    for k, name in enumerate(cm.pool.names):
        denominator = int(fn_plus_tp[k] + fp_plus_tp[k] - tp[k])
        value = int(tp[k]) / denominator if denominator > 0 else None
        out.append((name, value))
    return out


def per_class_acc(cm: ConfusionMatrix) -> list[tuple[str, float | None]]:
    """Ground-truth recall per class; None when the class has no gt pixels."""
    tp = np.diag(cm.counts)
    row_sums = cm.counts.sum(axis=1)
    out: list[tuple[str, float | None]] = []
    for k, name in enumerate(cm.pool.names):
        denominator = int(row_sums[k])
        value = int(tp[k]) / denominator if denominator > 0 else None
        out.append((name, value))
    return out


def overall(cm: ConfusionMatrix) -> tuple[float, float]:
    """(mIoU over defined classes, overall pixel accuracy)."""
    defined = [v for _, v in per_class_iou(cm) if v is not None]
    if not defined:
        raise NoDefinedClasses("every class has a zero IoU denominator")
    total = int(cm.counts.sum())
    miou = sum(defined) / len(defined)
    oa = int(np.trace(cm.counts)) / total
    return miou, oa


def category_accuracy(per_image: list[tuple[set[str], set[str]]]) -> float:
    """Mean per-image Jaccard between predicted and ground-truth name sets."""
    if not per_image:
        raise ValueError("category accuracy needs at least one image")
    scores = []
    for i, (pred_set, gt_set) in enumerate(per_image):
        if not gt_set:
            raise EmptyGroundTruthSet(f"image {i}")
        union = pred_set | gt_set
        scores.append(len(pred_set & gt_set) / len(union))
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class ClassMetrics:
    category: str
    iou: float | None
    acc: float | None


@dataclass(frozen=True)
class EvalReport:
    per_class: tuple[ClassMetrics, ...]
    miou: float
    oa: float
    cat_acc: float | None
    images_evaluated: int
    fallback_count: int


def build_report(
    cm: ConfusionMatrix,
    images_evaluated: int,
    vocab_pairs: list[tuple[set[str], set[str]]] | None = None,
    fallback_count: int = 0,
) -> EvalReport:
    ious = dict(per_class_iou(cm))
    accs = dict(per_class_acc(cm))
    miou, oa = overall(cm)
    cat_acc = category_accuracy(vocab_pairs) if vocab_pairs else None
    return EvalReport(
        per_class=tuple(
            ClassMetrics(category=name, iou=ious[name], acc=accs[name])
            for name in cm.pool.names
        ),
        miou=miou,
        oa=oa,
        cat_acc=cat_acc,
        images_evaluated=images_evaluated,
        fallback_count=fallback_count,
    )


def report_to_json_dict(report: EvalReport) -> dict:
    return {
        "per_class": [
            {"category": c.category, "iou": c.iou, "acc": c.acc}
            for c in report.per_class
        ],
        "miou": report.miou,
        "oa": report.oa,
        "cat_acc": report.cat_acc,
        "images_evaluated": report.images_evaluated,
        "fallback_count": report.fallback_count,
    }


def report_from_json_dict(payload: dict) -> EvalReport:
    return EvalReport(
        per_class=tuple(
            ClassMetrics(category=c["category"], iou=c["iou"], acc=c["acc"])
            for c in payload["per_class"]
        ),
        miou=payload["miou"],
        oa=payload["oa"],
        cat_acc=payload.get("cat_acc"),
        images_evaluated=payload["images_evaluated"],
        fallback_count=payload["fallback_count"],
    )


def _percent(value: float | None) -> str:
    return "—" if value is None else f"{value * 100:.2f}"


def render_report(report: EvalReport, format: str = "text_table") -> bytes:
    """Render the report as ``text_table``, ``json``, or ``csv`` bytes.

    The JSON and CSV forms are lossless; the table shows percentages with
    two decimals and marks undefined cells.
    """
    if format == "json":
        text = json.dumps(report_to_json_dict(report), indent=2) + "\n"
        return text.encode("utf-8")

    if format == "csv":
        lines = ["category,iou,acc"]
        for c in report.per_class:
            iou = "" if c.iou is None else repr(c.iou)
            acc = "" if c.acc is None else repr(c.acc)
            lines.append(f"{c.category},{iou},{acc}")
        lines.append(f"overall,{report.miou!r},{report.oa!r}")
        return ("\n".join(lines) + "\n").encode("utf-8")

    if format == "text_table":
        name_width = max(
            [len(c.category) for c in report.per_class] + [len("Category")]
        )
        lines = [f"{'Category':<{name_width}}  {'IoU':>7}  {'Acc':>7}"]
        undefined: list[str] = []
        for c in report.per_class:
            lines.append(
                f"{c.category:<{name_width}}  {_percent(c.iou):>7}  {_percent(c.acc):>7}"
            )
            if c.iou is None or c.acc is None:
                undefined.append(c.category)
        lines.append("")
        lines.append(f"{'Overall mIoU':<{name_width}}  {_percent(report.miou):>7}")
        lines.append(f"{'Overall OA':<{name_width}}  {_percent(report.oa):>7}")
        if report.cat_acc is not None:
            lines.append(
                f"{'Category accuracy':<{name_width}}  {_percent(report.cat_acc):>7}"
            )
        lines.append(
            f"Images evaluated: {report.images_evaluated}"
            f" (vocabulary fallbacks: {report.fallback_count})"
        )
        if undefined:
            lines.append(
                "— undefined (no pixels in ground truth or prediction): "
                + ", ".join(undefined)
            )
        return ("\n".join(lines) + "\n").encode("utf-8")

    raise ValueError(f"unknown report format {format!r}")
