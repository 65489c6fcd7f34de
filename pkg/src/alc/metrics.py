"""Overlap and surface-distance metrics for label grids (pixel units)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

NOT_COMPUTABLE = "NA"


class UndefinedMetricError(ValueError):
    """Surface distances are undefined when either mask is empty."""


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    total = p.sum() + g.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / total)


def jaccard(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def surface_points(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask (or the grid),
    as an (N, 2) array of (row, col)."""
    m = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1),
                                   border_value=0)
    return np.argwhere(m & ~inner)


def _surface_mask(mask: np.ndarray) -> np.ndarray:
    out = np.zeros(mask.shape, dtype=bool)
    pts = surface_points(mask)
    out[tuple(pts.T)] = True
    return out


def directed_surface_distances(a, b) -> np.ndarray:
    """Distance from each surface pixel of ``a`` to the nearest surface pixel of ``b``."""
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise UndefinedMetricError("surface distance needs two nonempty masks")
    sb = _surface_mask(b)
    dist_to_b = ndimage.distance_transform_edt(~sb)
    return dist_to_b[_surface_mask(a)]


def hd95(pred, gt) -> float:
    d_pg = directed_surface_distances(pred, gt)
    d_gp = directed_surface_distances(gt, pred)
    return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))


def hausdorff(pred, gt) -> float:
    return float(max(directed_surface_distances(pred, gt).max(),
                     directed_surface_distances(gt, pred).max()))


def asd(pred, gt) -> float:
    d = np.concatenate([directed_surface_distances(pred, gt),
                        directed_surface_distances(gt, pred)])
    return float(d.mean())


@dataclass
class MetricsReport:
    dice: float
    jaccard: float
    hd95: float   # nan when not computable
    asd: float
    per_class: dict[int, "MetricsReport"] = field(default_factory=dict)

    def row(self) -> list[str]:
        return [_fmt(self.dice), _fmt(self.jaccard), _fmt(self.hd95), _fmt(self.asd)]


def _fmt(x: float) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return NOT_COMPUTABLE
    return repr(float(x))


def _binary_report(pred: np.ndarray, gt: np.ndarray) -> MetricsReport:
    try:
        h, a = hd95(pred, gt), asd(pred, gt)
    except UndefinedMetricError:
        h = a = math.nan
    return MetricsReport(dice(pred, gt), jaccard(pred, gt), h, a)


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def evaluate_labels(pred, gt, n_classes: int) -> MetricsReport:
    """Per foreground class binary metrics; the top level is their mean."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    per = {c: _binary_report(pred == c, gt == c) for c in range(1, n_classes)}
    return MetricsReport(
        dice=float(np.mean([r.dice for r in per.values()])),
        jaccard=float(np.mean([r.jaccard for r in per.values()])),
        hd95=_nanmean(r.hd95 for r in per.values()),
        asd=_nanmean(r.asd for r in per.values()),
        per_class=per,
    )


def label_dice(pred, gt, n_classes: int) -> float:
    """Mean foreground-class Dice between two label grids."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    return float(np.mean([dice(pred == c, gt == c) for c in range(1, n_classes)]))


def mean_report(reports: list[MetricsReport]) -> MetricsReport:
    return MetricsReport(
        dice=float(np.mean([r.dice for r in reports])),
        jaccard=float(np.mean([r.jaccard for r in reports])),
        hd95=_nanmean(r.hd95 for r in reports),
        asd=_nanmean(r.asd for r in reports),
    )


def write_metrics_csv(path: str | Path, reports: dict[str, MetricsReport]) -> MetricsReport:
    """One row per (sample, class) plus a ``__mean__`` row over samples.
    Distances are in pixel units."""
    path = Path(path)
    mean = mean_report(list(reports.values()))
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "class", "dice", "jaccard", "hd95", "asd"])
        for sid, rep in reports.items():
            w.writerow([sid, "all", *rep.row()])
            if len(rep.per_class) > 1:
                for c, r in rep.per_class.items():
                    w.writerow([sid, c, *r.row()])
        w.writerow(["__mean__", "all", *mean.row()])
    return mean


def read_mean_row(path: str | Path) -> dict[str, float]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            if row["id"] == "__mean__":
                return {k: (math.nan if row[k] == NOT_COMPUTABLE else float(row[k]))
                        for k in ("dice", "jaccard", "hd95", "asd")}
    raise ValueError(f"no __mean__ row in {path}")
