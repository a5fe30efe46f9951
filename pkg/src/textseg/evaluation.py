"""Instance-wise evaluation with merge-and-match IoU.

A predicted instance matches a ground-truth instance when both have the same
class and share at least one pixel. A prediction overlapping several
ground-truth instances of its class is assigned exclusively to the one with
the largest overlap; ties go to the instance whose first pixel comes first in
raster order, which makes the result independent of how ids are numbered.
All predictions assigned to one ground-truth instance are merged before its
IoU is computed; unmatched ground truth scores 0.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Literal, Sequence

import numpy as np

from .errors import ShapeError, StructuralError
from .masks import ClassMap, InstanceMap

ACRE_M2 = 4046.8564224

# (label, lower bound inclusive, upper bound exclusive) in square metres
AREA_BUCKETS: tuple[tuple[str, float, float], ...] = (
    ("<100 m2", 0.0, 100.0),
    ("100-500 m2", 100.0, 500.0),
    ("500 m2-1 acre", 500.0, ACRE_M2),
    ("1-2 acre", ACRE_M2, 2 * ACRE_M2),
    ("2-5 acre", 2 * ACRE_M2, 5 * ACRE_M2),
    (">5 acre", 5 * ACRE_M2, float("inf")),
)

MATCHING_RULE = (
    "same class and >=1 shared pixel; a prediction overlapping several ground-truth instances "
    "is assigned to the one with maximum overlap (ties: earliest first pixel in raster order); "
    "assigned predictions are merged per ground-truth instance"
)


@dataclass(frozen=True)
class GtRecord:
    gt_id: int
    class_id: int
    pixels: int
    matched: tuple[int, ...]
    merged_pixels: int
    intersection: int

    @property
    def union(self) -> int:
        return self.merged_pixels + self.pixels - self.intersection

    @property
    def iou(self) -> float:
        return self.intersection / self.union if self.matched else 0.0


@dataclass(frozen=True)
class MatchResult:
    gt: tuple[GtRecord, ...]
    pred_classes: dict[int, int]
    assignment: dict[int, int | None]
    pred_pixels: dict[int, int] = field(default_factory=dict)

    @property
    def unmatched_pred(self) -> list[int]:
        return [p for p, g in self.assignment.items() if g is None]

    def by_gt(self) -> dict[int, GtRecord]:
        return {r.gt_id: r for r in self.gt}


def match_and_merge(pred: InstanceMap, gt: InstanceMap) -> MatchResult:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} shapes differ")
    g = gt.data.ravel().astype(np.int64)
    p = pred.data.ravel().astype(np.int64)

    gt_ids, gt_first, gt_sizes = np.unique(g, return_index=True, return_counts=True)
    first_px = {int(i): int(f) for i, f in zip(gt_ids, gt_first) if i}
    gt_size = {int(i): int(n) for i, n in zip(gt_ids, gt_sizes) if i}
    pr_ids, pr_sizes = np.unique(p, return_counts=True)
    pred_size = {int(i): int(n) for i, n in zip(pr_ids, pr_sizes) if i}

    both = (g > 0) & (p > 0)
    stride = int(p.max()) + 1
    pairs, counts = np.unique(g[both] * stride + p[both], return_counts=True)
    overlaps: dict[int, list[tuple[int, int]]] = {}
    for key, n in zip(pairs.tolist(), counts.tolist()):
        gi, pi = divmod(key, stride)
        if gt.classes[gi] == pred.classes[pi]:
            overlaps.setdefault(pi, []).append((gi, n))

    assignment: dict[int, int | None] = {}
    inter: dict[int, int] = {}
    members: dict[int, list[int]] = {}
    for pi in pred.classes:
        cands = overlaps.get(pi)
        if not cands:
            assignment[pi] = None
            continue
        gi, n = min(cands, key=lambda t: (-t[1], first_px[t[0]]))
        assignment[pi] = gi
        inter[gi] = inter.get(gi, 0) + n
        members.setdefault(gi, []).append(pi)

    records = tuple(
        GtRecord(
            gt_id=gi,
            class_id=ci,
            pixels=gt_size[gi],
            matched=tuple(sorted(members.get(gi, ()))),
            merged_pixels=sum(pred_size[pi] for pi in members.get(gi, ())),
            intersection=inter.get(gi, 0),
        )
        for gi, ci in gt.classes.items()
    )
    return MatchResult(records, dict(pred.classes), assignment, pred_size)


def _pool(m: MatchResult | Sequence[MatchResult]) -> list[MatchResult]:
    return [m] if isinstance(m, MatchResult) else list(m)


def _classes_of(results: list[MatchResult]) -> list[int]:
    ks = {r.class_id for m in results for r in m.gt} | {c for m in results for c in m.pred_classes.values()}
    return sorted(ks)


def instance_metrics(m: MatchResult | Sequence[MatchResult], classes: Sequence[int] | None = None) -> dict:
    """Per-class mean and median of per-instance IoU, pooled over all given results.

    Classes without ground-truth instances report ``None``.
    """
    results = _pool(m)
    classes = _classes_of(results) if classes is None else list(classes)
    out = {}
    for k in classes:
        ious = [r.iou for res in results for r in res.gt if r.class_id == k]
        if ious:
            out[k] = {"mean": float(np.mean(ious)), "median": float(np.median(ious)), "n_gt": len(ious)}
        else:
            out[k] = {"mean": None, "median": None, "n_gt": 0}
    return out


EmptyPolicy = Literal["paper", "na"]


def fnr_fpr(
    m: MatchResult | Sequence[MatchResult],
    classes: Sequence[int] | None = None,
    empty: EmptyPolicy = "paper",
) -> dict[int, tuple[float | None, float | None]]:
    """False-negative and false-positive rates in percent, per class.

    A zero denominator is resolved as follows: no ground truth but some
    predictions gives FNR 0; no predictions but some ground truth gives FPR 100;
    neither gives 100/100 under ``empty="paper"`` and None/None under ``"na"``.
    """
    results = _pool(m)
    classes = _classes_of(results) if classes is None else list(classes)
    out = {}
    for k in classes:
        n_gt = sum(1 for res in results for r in res.gt if r.class_id == k)
        miss = sum(1 for res in results for r in res.gt if r.class_id == k and not r.matched)
        n_pred = sum(1 for res in results for c in res.pred_classes.values() if c == k)
        fp = sum(1 for res in results for p in res.unmatched_pred if res.pred_classes[p] == k)
        if n_gt == 0 and n_pred == 0:
            out[k] = (100.0, 100.0) if empty == "paper" else (None, None)
            continue
        fnr = 100.0 * miss / n_gt if n_gt else 0.0
        fpr = 100.0 * fp / n_pred if n_pred else 100.0
        out[k] = (fnr, fpr)
    return out


@dataclass(frozen=True)
class ParamCounts:
    base: int
    projection: int = 0
    decoder: int = 0

    def __post_init__(self):
        if min(self.base, self.projection, self.decoder) < 0:
            raise StructuralError("parameter counts must be non-negative")

    @property
    def total(self) -> int:
        return self.base + self.projection + self.decoder


def overhead(p: ParamCounts) -> float:
    """Auxiliary (projection + decoder) parameters as a percentage of the base model."""
    if p.base == 0:
        raise ZeroDivisionError("base parameter count is zero")
    return 100 * (p.projection + p.decoder) / p.base


def overhead_exact(p: ParamCounts) -> Fraction:
    if p.base == 0:
        raise ZeroDivisionError("base parameter count is zero")
    return Fraction(100 * (p.projection + p.decoder), p.base)


def area_bucket(area_m2: float, buckets=AREA_BUCKETS) -> str:
    for label, lo, hi in buckets:
        if lo <= area_m2 < hi:
            return label
    raise StructuralError(f"area {area_m2} outside every bucket")


def stratify_by_area(
    m: MatchResult | Sequence[MatchResult],
    gsd_m_per_px: float,
    buckets=AREA_BUCKETS,
    class_id: int | None = None,
) -> list[dict]:
    """Mean IoU and instance count of ground-truth instances per area bucket."""
    if gsd_m_per_px <= 0:
        raise StructuralError("ground sample distance must be > 0")
    px_area = gsd_m_per_px * gsd_m_per_px
    groups: dict[str, list[float]] = {label: [] for label, _, _ in buckets}
    for res in _pool(m):
        for r in res.gt:
            if class_id is None or r.class_id == class_id:
                groups[area_bucket(r.pixels * px_area, buckets)].append(r.iou)
    return [
        {
            "bucket": label,
            "min_m2": lo,
            "max_m2": None if hi == float("inf") else hi,
            "count": len(groups[label]),
            "mean_iou": float(np.mean(groups[label])) if groups[label] else None,
        }
        for label, lo, hi in buckets
    ]


# --- report ----------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    classes: tuple[int, ...] | None = None
    empty: EmptyPolicy = "paper"
    gsd_m_per_px: float | None = None
    area_class: int | None = None
    params: ParamCounts | None = None


@dataclass
class EvalReport:
    per_class: dict[str, dict]
    n_images: int
    area: list[dict] | None = None
    overhead_pct: float | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        def f(v):
            if v is None:
                return "n/a"
            return f"{v:.2f}"

        lines = [f"{'class':<14}{'mean IoU':>10}{'median':>10}{'FNR %':>10}{'FPR %':>10}{'#gt':>7}{'#pred':>7}"]
        for name, row in self.per_class.items():
            lines.append(
                f"{name:<14}{f(row['mean_iou']):>10}{f(row['median_iou']):>10}"
                f"{f(row['fnr']):>10}{f(row['fpr']):>10}{row['n_gt']:>7}{row['n_pred']:>7}"
            )
        if self.overhead_pct is not None:
            lines.append(f"overhead: {self.overhead_pct:.2f}%")
        if self.area:
            lines.append("area buckets:")
            for b in self.area:
                lines.append(f"  {b['bucket']:<14}{b['count']:>7}  {f(b['mean_iou']):>8}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        """Metrics as rows and classes as columns."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = list(self.per_class)
        w.writerow(["metric", *names])
        for key, title in (("mean_iou", "mean IoU"), ("median_iou", "median IoU"), ("fnr", "FNR"), ("fpr", "FPR")):
            row = [self.per_class[n][key] for n in names]
            w.writerow([title, *("" if v is None else f"{v:.2f}" for v in row)])
        if self.overhead_pct is not None:
            w.writerow(["Overhead %", *[f"{self.overhead_pct:.2f}"] * len(names)])
        return buf.getvalue()


def evaluate(
    pred: InstanceMap | Sequence[InstanceMap],
    gt: InstanceMap | Sequence[InstanceMap],
    cfg: EvalConfig = EvalConfig(),
    class_map: ClassMap | None = None,
) -> EvalReport:
    """Evaluate one image pair or pool several pairs instance by instance."""
    preds = [pred] if isinstance(pred, InstanceMap) else list(pred)
    gts = [gt] if isinstance(gt, InstanceMap) else list(gt)
    if len(preds) != len(gts):
        raise StructuralError(f"{len(preds)} predictions for {len(gts)} ground-truth maps")
    results = [match_and_merge(p, g) for p, g in zip(preds, gts)]
    bg = class_map.background_id if class_map is not None else 0
    if cfg.classes is not None:
        classes = list(cfg.classes)
    elif class_map is not None:
        classes = [c for c in class_map.ids if c != bg]
    else:
        classes = _classes_of(results)
    ious = instance_metrics(results, classes)
    rates = fnr_fpr(results, classes, cfg.empty)

    def name(k: int) -> str:
        return class_map.label_of(k) if class_map is not None else str(k)

    per_class = {}
    for k in classes:
        n_pred = sum(1 for res in results for c in res.pred_classes.values() if c == k)
        per_class[name(k)] = {
            "class_id": k,
            "mean_iou": ious[k]["mean"],
            "median_iou": ious[k]["median"],
            "fnr": rates[k][0],
            "fpr": rates[k][1],
            "n_gt": ious[k]["n_gt"],
            "n_pred": n_pred,
        }
    area = None
    if cfg.gsd_m_per_px is not None:
        area = stratify_by_area(results, cfg.gsd_m_per_px, class_id=cfg.area_class)
    return EvalReport(
        per_class=per_class,
        n_images=len(results),
        area=area,
        overhead_pct=overhead(cfg.params) if cfg.params is not None else None,
        metadata={
            "matching": MATCHING_RULE,
            "empty_class_convention": "100/100" if cfg.empty == "paper" else "n/a",
            "median_includes_unmatched_zeros": True,
            "gsd_m_per_px": cfg.gsd_m_per_px,
            "acre_m2": ACRE_M2,
        },
    )
