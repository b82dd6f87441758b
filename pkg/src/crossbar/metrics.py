"""Segmentation metrics: dice ratio, true positive fraction, boundary
Hausdorff distance and centroid distance, plus dataset summaries."""
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _kernels

DR_BIN_WIDTH = 0.02


@dataclass
class MetricsRecord:
    image_id: str
    dr: float
    tpf: float
    hd: float
    cd: float


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask dims differ: {pred.shape} vs {truth.shape}")
    return pred, truth


def dice(pred, truth):
    """``2|P & G| / (|P| + |G|)``; two empty masks score 1."""
    pred, truth = _pair(pred, truth)
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(pred & truth)) / total


def tpf(pred, truth):
    pred, truth = _pair(pred, truth)
    n = int(truth.sum())
    if n == 0:
        raise ValueError("undefined TPF: empty ground truth")
    return int(np.count_nonzero(pred & truth)) / n


def boundary(mask):
    """Foreground pixels with a 4-neighbour in the background; pixels
    outside the image count as background."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(np.pad(mask, 1), structure=ndimage.generate_binary_structure(2, 1))
    return mask & ~inner[1:-1, 1:-1]


def hausdorff(pred, truth):
    """Symmetric Hausdorff distance between the two mask boundaries."""
    pred, truth = _pair(pred, truth)
    if not pred.any() or not truth.any():
        raise ValueError("hausdorff undefined for an empty mask")
    a = np.argwhere(boundary(pred))
    b = np.argwhere(boundary(truth))
    d2 = max(_kernels.directed_hausdorff_sq(a, b), _kernels.directed_hausdorff_sq(b, a))
    return math.sqrt(d2)


def centroid(mask):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("centroid undefined for an empty mask")
    pts = np.argwhere(mask)
    return pts.mean(axis=0)


def centroid_distance(pred, truth):
    pred, truth = _pair(pred, truth)
    return float(np.linalg.norm(centroid(pred) - centroid(truth)))


def evaluate(pred, truth, image_id=""):
    """All four metrics for one image. HD and CD are NaN when the prediction
    is empty (they have no defined value there)."""
    pred, truth = _pair(pred, truth)
    if pred.any():
        hd, cd = hausdorff(pred, truth), centroid_distance(pred, truth)
    else:
        hd = cd = float("nan")
    return MetricsRecord(image_id, dice(pred, truth), tpf(pred, truth), hd, cd)


def dr_histogram(values, width=DR_BIN_WIDTH):
    """Fixed-width bins over [0, 1]; 1.0 falls in the last bin.
    Returns ``[(low, high, count), ...]``."""
    n_bins = int(round(1 / width))
    idx = np.clip(np.floor(np.asarray(values, dtype=np.float64) / width).astype(int), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    return [(round(k * width, 10), round((k + 1) * width, 10), int(counts[k])) for k in range(n_bins)]


def summarize(records):
    if not records:
        raise ValueError("summarize needs at least one record")
    out = {}
    for name in ("dr", "tpf", "hd", "cd"):
        vals = np.array([getattr(r, name) for r in records], dtype=np.float64)
        finite = vals[np.isfinite(vals)]
        out[name] = float(finite.mean()) if len(finite) else float("nan")
    dr_vals = [r.dr for r in records]
    return {"means": out, "dr_values": dr_vals, "dr_histogram": dr_histogram(dr_vals)}


def _fmt(x):
    return "nan" if not np.isfinite(x) else repr(float(x))


def write_metrics_csv(records, fh):
    fh.write("image_id,dr,tpf,hd,cd\n")
    for r in records:
        fh.write(f"{r.image_id},{_fmt(r.dr)},{_fmt(r.tpf)},{_fmt(r.hd)},{_fmt(r.cd)}\n")


def read_metrics_csv(fh):
    lines = fh.read().splitlines()
    if not lines or lines[0] != "image_id,dr,tpf,hd,cd":
        raise ValueError("bad metrics CSV header")
    out = []
    for line in lines[1:]:
        if line:
            i, *vals = line.split(",")
            out.append(MetricsRecord(i, *(float(v) for v in vals)))
    return out


def write_histogram_csv(hist, fh):
    fh.write("bin_low,bin_high,count\n")
    for lo, hi, n in hist:
        fh.write(f"{lo},{hi},{n}\n")
