"""Segmentation metrics: Dice, IoU, weighted F-measure, S-measure, max E-measure, MAE.

Predictions are continuous maps in [0, 1]; ground truths are binary. Dice and
IoU binarize the prediction at a fixed threshold, the other four work on the
continuous map.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate, distance_transform_edt

EPS = np.finfo(np.float64).eps
METRIC_NAMES = ("mdice", "miou", "wfm", "s_measure", "e_measure", "mae")
TABLE_HEADERS = ("mDice", "mIoU", "Fwb", "Sa", "Emax", "MAE")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt.astype(bool)


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(pred) >= threshold).astype(np.uint8)


def dice(pred_bin, gt_bin) -> float:
    p, g = _pair(pred_bin, gt_bin)
    p = p.astype(bool)
    total = p.sum() + g.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(p, g).sum() / total


def iou(pred_bin, gt_bin) -> float:
    p, g = _pair(pred_bin, gt_bin)
    p = p.astype(bool)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return np.logical_and(p, g).sum() / union


def mae(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean(np.abs(p - g)))


# ---------------------------------------------------------------------------
# weighted F-measure


def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2.0
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    k[k < EPS * k.max()] = 0
    return k / k.sum()


def _circle_offsets(d2: int) -> list[tuple[int, int]]:
    """Lattice offsets with dy^2 + dx^2 == d2, in row-major (dy, dx) order."""
    r = math.isqrt(d2)
    out = []
    for dy in range(-r, r + 1):
        rem = d2 - dy * dy
        dx = math.isqrt(rem)
        if dx * dx == rem:
            out.extend([(dy, -dx), (dy, dx)] if dx else [(dy, 0)])
    return out


def nearest_foreground(gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance to and flat index of the nearest foreground pixel.

    Ties go to the smallest row-major index. Foreground pixels map to
    themselves at distance zero.
    """
    h, w = gt.shape
    dist = distance_transform_edt(~gt)
    d2 = np.rint(dist * dist).astype(np.int64)
    nearest = np.full(gt.shape, -1, dtype=np.int64)
    nearest[gt] = np.flatnonzero(gt)
    rows, cols = np.nonzero(~gt)
    for value in np.unique(d2[rows, cols]):
        sel = d2[rows, cols] == value
        r, c = rows[sel], cols[sel]
        found = np.full(r.shape, -1, dtype=np.int64)
        for dy, dx in _circle_offsets(int(value)):
            rr, cc = r + dy, c + dx
            ok = (found < 0) & (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            ok[ok] = gt[rr[ok], cc[ok]]
            found[ok] = rr[ok] * w + cc[ok]
        nearest[r, c] = found
    return dist, nearest


def weighted_fmeasure(pred, gt, beta2: float = 1.0) -> float:
    """Weighted F-measure with a 7x7, sigma=5 dependency kernel and distance-decayed importance.

    An empty ground truth scores 1.0 for an all-zero prediction and 0.0 otherwise.
    """
    p, g = _pair(pred, gt)
    if not g.any():
        return 1.0 if not p.any() else 0.0
    err = np.abs(p - g)
    dist, nearest = nearest_foreground(g)
    et = err.copy()
    et[~g] = err.reshape(-1)[nearest[~g]]
    size = min(7, min(g.shape) - (1 - min(g.shape) % 2))
    ea = correlate(et, gaussian_kernel(size, 5.0), mode="constant", cval=0.0)
    min_e_ea = err.copy()
    take = g & (ea < err)
    min_e_ea[take] = ea[take]
    importance = np.ones_like(err)
    importance[~g] = 2.0 - np.exp(np.log(0.5) / 5.0 * dist[~g])
    ew = min_e_ea * importance
    tpw = g.sum() - ew[g].sum()
    fpw = ew[~g].sum()
    recall = 1.0 - ew[g].mean()
    precision = tpw / (EPS + tpw + fpw)
    q = (1.0 + beta2) * recall * precision / (EPS + recall + beta2 * precision)
    return float(q)


# ---------------------------------------------------------------------------
# S-measure


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def _s_object(pred: np.ndarray, mask: np.ndarray) -> float:
    vals = pred[mask]
    if vals.size == 0:
        return 0.0
    x = vals.mean()
    sigma = vals.std(ddof=1) if vals.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def _object_score(pred: np.ndarray, gt: np.ndarray) -> float:
    fg = np.where(gt, pred, 0.0)
    bg = np.where(gt, 0.0, 1.0 - pred)
    u = gt.mean()
    return u * _s_object(fg, gt) + (1.0 - u) * _s_object(bg, ~gt)


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    """1-based (column, row) centroid, rounded half away from zero."""
    h, w = gt.shape
    total = gt.sum()
    if total == 0:
        return _round_half_away(w / 2), _round_half_away(h / 2)
    cols = np.arange(1, w + 1)
    rows = np.arange(1, h + 1)
    x = _round_half_away(float((gt.sum(axis=0) * cols).sum() / total))
    y = _round_half_away(float((gt.sum(axis=1) * rows).sum() / total))
    return x, y


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + EPS)
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    if beta == 0:
        return 1.0
    return 0.0


def _region_score(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    x, y = _centroid(gt)
    area = h * w
    gtf = gt.astype(np.float64)
    quads = [(slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
             (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))]
    w1 = x * y / area
    w2 = (w - x) * y / area
    w3 = x * (h - y) / area
    weights = (w1, w2, w3, 1.0 - w1 - w2 - w3)
    return sum(wt * _ssim(pred[q], gtf[q]) for wt, q in zip(weights, quads))


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    p, g = _pair(pred, gt)
    y = g.mean()
    if y == 0:
        return float(1.0 - p.mean())
    if y == 1:
        return float(p.mean())
    q = alpha * _object_score(p, g) + (1.0 - alpha) * _region_score(p, g)
    return float(max(q, 0.0))


# ---------------------------------------------------------------------------
# E-measure


def e_measure_at(fm: np.ndarray, gt: np.ndarray) -> float:
    """Enhanced-alignment score of one binary map, normalized by the pixel count."""
    fm = fm.astype(np.float64)
    g = gt.astype(np.float64)
    if not gt.any():
        enhanced = 1.0 - fm
    elif gt.all():
        enhanced = fm
    else:
        afm = fm - fm.mean()
        agt = g - g.mean()
        align = 2.0 * agt * afm / (agt * agt + afm * afm + EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.sum() / gt.size)


def e_measure(pred, gt, n_thresholds: int = 256) -> float:
    """Maximum enhanced-alignment score over thresholds k / (n-1), binarizing with ``>=``."""
    p, g = _pair(pred, gt)
    thresholds = np.arange(n_thresholds) / (n_thresholds - 1.0)
    best = 0.0
    for t in thresholds:
        best = max(best, e_measure_at(p >= t, g))
    return float(best)


# ---------------------------------------------------------------------------
# aggregation


def image_metrics(pred, gt, threshold: float = 0.5) -> dict[str, float]:
    p, g = _pair(pred, gt)
    pb = binarize(p, threshold)
    return {
        "mdice": float(dice(pb, g)),
        "miou": float(iou(pb, g)),
        "wfm": weighted_fmeasure(p, g),
        "s_measure": s_measure(p, g),
        "e_measure": e_measure(p, g),
        "mae": mae(p, g),
    }


@dataclass
class MetricReport:
    ids: list[str] = field(default_factory=list)
    per_image: list[dict[str, float]] = field(default_factory=list)

    def add(self, image_id: str, values: dict[str, float]) -> None:
        self.ids.append(image_id)
        self.per_image.append(values)

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def means(self) -> dict[str, float]:
        if not self.per_image:
            return {k: float("nan") for k in METRIC_NAMES}
        return {k: math.fsum(r[k] for r in self.per_image) / self.count for k in METRIC_NAMES}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", *METRIC_NAMES])
        for image_id, row in zip(self.ids, self.per_image):
            writer.writerow([image_id, *(repr(row[k]) for k in METRIC_NAMES)])
        means = self.means
        writer.writerow(["mean", *(repr(means[k]) for k in METRIC_NAMES)])
        return buf.getvalue()

    def to_table(self, title: str = "") -> str:
        means = self.means
        head = " | ".join(f"{h:>6}" for h in TABLE_HEADERS)
        vals = " | ".join(f"{means[k]:6.3f}" for k in METRIC_NAMES)
        lines = [title] if title else []
        lines += [head, "-" * len(head), vals, f"({self.count} images)"]
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, table_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.txt"
        csv_path.write_text(self.to_csv())
        table_path.write_text(self.to_table())
        return csv_path, table_path


def _strip_suffix(stem: str) -> str:
    return stem[:-5] if stem.endswith("_prob") else stem


def evaluate_pairs(pairs, threshold: float = 0.5) -> MetricReport:
    """``pairs`` yields ``(id, pred, gt)`` in the order they should be reported."""
    report = MetricReport()
    for image_id, pred, gt in pairs:
        if np.shape(pred) != np.shape(gt):
            raise ValueError(f"{image_id}: prediction {np.shape(pred)} and ground truth "
                             f"{np.shape(gt)} differ in size")
        report.add(image_id, image_metrics(pred, gt, threshold))
    return report


def evaluate_dataset(pred_dir, gt_dir, threshold: float = 0.5) -> MetricReport:
    """Score every ground-truth mask in ``gt_dir`` against its namesake in ``pred_dir``.

    Prediction files may be ``<id>.pgm`` or ``<id>_prob.pgm``.
    """
    from .imageio import read_gray, read_mask

    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = {_strip_suffix(p.stem): p for p in sorted(pred_dir.glob("*.pgm"))
             if not p.stem.endswith("_mask")}
    gts = {p.stem: p for p in sorted(gt_dir.glob("*.pgm"))}
    if not set(preds) & set(gts):
        raise FileNotFoundError(f"no matching mask names between {pred_dir} and {gt_dir}")
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise FileNotFoundError(f"no prediction for ground truth {gts[missing[0]]}")

    def pairs():
        for image_id in sorted(gts):
            yield image_id, read_gray(preds[image_id])[0], read_mask(gts[image_id])[0]

    return evaluate_pairs(pairs(), threshold)
