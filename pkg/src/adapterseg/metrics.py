"""Binary segmentation metrics: S-measure, mean E-measure, weighted F-measure, MAE, BER, Dice/IoU, F1.

``pred`` maps are floats in [0, 1]; ``gt`` masks are binary. The confusion-matrix
metrics (mae, dice_iou, ber, f1_semantic) accept arbitrary leading batch axes and
reduce over the last two.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

_EPS = np.spacing(1)

METRIC_KEYS = ("s_alpha", "e_phi", "f_beta_w", "mae", "ber", "m_dice", "m_iou", "f1")
TASK_METRICS = {
    "cod": ("s_alpha", "e_phi", "f_beta_w", "mae"),
    "shadow": ("ber",),
    "polyp": ("m_dice", "m_iou"),
    "cell": ("f1",),
}


def _prepare(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    return pred, gt > 0.5


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def mae(pred, gt):
    pred, gt = _prepare(pred, gt)
    return _scalar(np.abs(pred - gt).mean(axis=(-2, -1)))


def confusion(pred, gt, threshold: float = 0.5):
    """(tp, fp, fn, tn) counts over the last two axes, pred binarized at ``pred >= threshold``."""
    pred, gt = _prepare(pred, gt)
    p = pred >= threshold
    tp = np.count_nonzero(p & gt, axis=(-2, -1))
    fp = np.count_nonzero(p & ~gt, axis=(-2, -1))
    fn = np.count_nonzero(~p & gt, axis=(-2, -1))
    tn = np.count_nonzero(~p & ~gt, axis=(-2, -1))
    return tp, fp, fn, tn


def _ratio(num, den, empty):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.where(den > 0, num / np.where(den > 0, den, 1), empty)


def dice_iou(pred, gt, threshold: float = 0.5):
    """(dice, iou); both 1 when prediction and mask are both empty."""
    tp, fp, fn, _ = confusion(pred, gt, threshold)
    dice = _ratio(2 * tp, 2 * tp + fp + fn, 1.0)
    iou = _ratio(tp, tp + fp + fn, 1.0)
    return _scalar(dice), _scalar(iou)


def ber(pred, gt, threshold: float = 0.5):
    """Balanced error rate in percent. A class absent from ``gt`` contributes a rate of 1."""
    tp, fp, fn, tn = confusion(pred, gt, threshold)
    tpr = _ratio(tp, tp + fn, 1.0)
    tnr = _ratio(tn, tn + fp, 1.0)
    return _scalar(100.0 * (1.0 - 0.5 * (tpr + tnr)))


def f1_semantic(pred, gt, threshold: float = 0.5):
    tp, fp, fn, _ = confusion(pred, gt, threshold)
    precision = _ratio(tp, tp + fp, 0.0)
    recall = _ratio(tp, tp + fn, 0.0)
    f1 = _ratio(2 * precision * recall, precision + recall, 0.0)
    both_empty = (tp + fp + fn) == 0
    return _scalar(np.where(both_empty, 1.0, f1))


# ---------------------------------------------------------------- S-measure

def _object_score(x: np.ndarray) -> float:
    mean = x.mean()
    std = x.std(ddof=1) if x.size > 1 else 0.0
    return 2 * mean / (mean ** 2 + 1 + std + _EPS)


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    u = gt.mean()
    fg = _object_score(pred[gt])
    bg = _object_score(1 - pred[~gt])
    return u * fg + (1 - u) * bg


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x, y = pred.mean(), gt.mean()
    dof = max(n - 1, 1)
    sx = ((pred - x) ** 2).sum() / dof
    sy = ((gt - y) ** 2).sum() / dof
    sxy = ((pred - x) * (gt - y)).sum() / dof
    a = 4 * x * y * sxy
    b = (x ** 2 + y ** 2) * (sx + sy)
    if a != 0:
        return a / (b + _EPS)
    return 1.0 if b == 0 else 0.0


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    rows, cols = np.nonzero(gt)
    # 1-based split point as in the reference MATLAB code
    cy = int(np.round(rows.mean())) + 1
    cx = int(np.round(cols.mean())) + 1
    gtf = gt.astype(np.float64)
    score = 0.0
    for rs, cs in ((slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, w)),
                   (slice(cy, h), slice(0, cx)), (slice(cy, h), slice(cx, w))):
        p = pred[rs, cs]
        if p.size == 0:
            continue
        score += p.size / (h * w) * _ssim(p, gtf[rs, cs])
    return score


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure: alpha * object score + (1 - alpha) * region score, clamped to [0, 1]."""
    pred, gt = _prepare(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1 - pred.mean())
    if y == 1:
        return float(pred.mean())
    s = alpha * _s_object(pred, gt) + (1 - alpha) * _s_region(pred, gt)
    return float(min(max(s, 0.0), 1.0))


# ---------------------------------------------------------------- E-measure

E_THRESHOLDS = np.arange(256) / 255.0


def _e_curve(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    n = gt.size
    n_fg = np.count_nonzero(gt)
    # pixels with pred == 0 are never foreground, so t = 0 does not flood the map
    fg_vals = np.sort(pred[gt & (pred > 0)])
    bg_vals = np.sort(pred[~gt & (pred > 0)])
    a = fg_vals.size - np.searchsorted(fg_vals, E_THRESHOLDS, side="left")  # pred fg & gt fg
    b = bg_vals.size - np.searchsorted(bg_vals, E_THRESHOLDS, side="left")  # pred fg & gt bg
    pred_fg = a + b
    if n_fg == 0:
        return (n - pred_fg) / n
    if n_fg == n:
        return pred_fg / n
    mp = pred_fg / n
    mg = n_fg / n
    total = np.zeros(E_THRESHOLDS.shape)
    parts = (
        (a, 1 - mp, 1 - mg),
        (b, 1 - mp, -mg),
        (n_fg - a, -mp, 1 - mg),
        (n - n_fg - b, -mp, -mg),
    )
    for count, dp, dg in parts:
        align = 2 * dp * dg / (dp ** 2 + dg ** 2)
        total = total + count * (align + 1) ** 2 / 4
    return total / n


def e_measure_curve(pred, gt) -> np.ndarray:
    """E-measure at each of the 256 thresholds k/255."""
    pred, gt = _prepare(pred, gt)
    return _e_curve(pred, gt)


def e_measure_mean(pred, gt) -> float:
    return float(e_measure_curve(pred, gt).mean())


def e_measure_adaptive(pred, gt) -> float:
    """E-measure at the adaptive threshold min(2 * mean(pred), 1)."""
    pred, gt = _prepare(pred, gt)
    t = min(2 * pred.mean(), 1.0)
    p = (pred >= t) & (pred > 0)
    if gt.all():
        return float(p.mean())
    if not gt.any():
        return float(1 - p.mean())
    dp = p - p.mean()
    dg = gt - gt.mean()
    align = 2 * dp * dg / (dp ** 2 + dg ** 2)
    return float(((align + 1) ** 2 / 4).mean())


# ---------------------------------------------------------------- weighted F-measure

def matlab_gaussian(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    """Equivalent of MATLAB fspecial('gaussian', [size size], sigma)."""
    m = (size - 1) / 2
    y, x = np.ogrid[-m:m + 1, -m:m + 1]
    h = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def _nearest_fg_values(err: np.ndarray, gt: np.ndarray, radius: int) -> np.ndarray:
    """err with every background pixel near the mask replaced by err at its nearest fg pixel.

    Only pixels within ``radius`` (Chebyshev) of the mask are filled; others keep err.
    Equidistant candidates resolve to the smallest row-major index.
    """
    h, w = gt.shape
    band = ndimage.binary_dilation(gt, structure=np.ones((2 * radius + 1,) * 2, bool)) & ~gt
    out = err.copy()
    todo = band.copy()
    reach = int(math.floor(math.sqrt(2) * radius))
    offsets = sorted(
        (dy * dy + dx * dx, dy, dx)
        for dy in range(-reach, reach + 1) for dx in range(-reach, reach + 1)
        if dy * dy + dx * dx <= 2 * radius * radius)
    pad = reach
    gt_p = np.pad(gt, pad)
    err_p = np.pad(err, pad)
    for _, dy, dx in offsets:
        if not todo.any():
            break
        hit = gt_p[pad + dy:pad + dy + h, pad + dx:pad + dx + w] & todo
        out[hit] = err_p[pad + dy:pad + dy + h, pad + dx:pad + dx + w][hit]
        todo &= ~hit
    return out


def weighted_f_beta(pred, gt, beta2: float = 1.0, return_flag: bool = False):
    """Weighted F-measure. Returns 0 (flagged) when gt has no foreground."""
    pred, gt = _prepare(pred, gt)
    if not gt.any():
        return (0.0, True) if return_flag else 0.0
    kernel = matlab_gaussian(7, 5.0)
    dist = ndimage.distance_transform_edt(~gt)
    err = np.abs(pred - gt)
    spread = _nearest_fg_values(err, gt, radius=kernel.shape[0] // 2)
    smoothed = ndimage.convolve(spread, kernel, mode="constant", cval=0.0)
    min_err = np.where(gt & (smoothed < err), smoothed, err)
    importance = np.where(gt, 1.0, 2 - np.exp(np.log(0.5) / 5 * dist))
    ew = min_err * importance
    tp_w = gt.sum() - ew[gt].sum()
    fp_w = ew[~gt].sum()
    recall = 1 - ew[gt].mean()
    precision = tp_w / (tp_w + fp_w) if tp_w + fp_w > 0 else 0.0
    den = beta2 * precision + recall
    q = (1 + beta2) * precision * recall / den if den > 0 else 0.0
    q = float(q)
    return (q, False) if return_flag else q


# ---------------------------------------------------------------- per-image and dataset evaluation

def image_metrics(pred, gt, keys: Sequence[str] = METRIC_KEYS, threshold: float = 0.5) -> dict[str, float]:
    out = {}
    if "s_alpha" in keys:
        out["s_alpha"] = s_measure(pred, gt)
    if "e_phi" in keys:
        out["e_phi"] = e_measure_mean(pred, gt)
    if "f_beta_w" in keys:
        out["f_beta_w"] = weighted_f_beta(pred, gt)
    if "mae" in keys:
        out["mae"] = mae(pred, gt)
    if "ber" in keys:
        out["ber"] = ber(pred, gt, threshold)
    if "m_dice" in keys or "m_iou" in keys:
        d, i = dice_iou(pred, gt, threshold)
        if "m_dice" in keys:
            out["m_dice"] = d
        if "m_iou" in keys:
            out["m_iou"] = i
    if "f1" in keys:
        out["f1"] = f1_semantic(pred, gt, threshold)
    return out


@dataclass
class MetricReport:
    dataset_id: str
    task: str
    values: dict[str, float] = field(default_factory=dict)
    per_image: dict[str, dict[str, float]] = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)
    flags: dict[str, object] = field(default_factory=dict)
    method: str = "measured"

    def __getattr__(self, name):
        if name in METRIC_KEYS:
            return self.__dict__.get("values", {}).get(name)
        raise AttributeError(name)

    @classmethod
    def aggregate(cls, dataset_id: str, task: str, per_image: dict[str, dict[str, float]],
                  **kwargs) -> "MetricReport":
        keys = [k for k in METRIC_KEYS if any(k in v for v in per_image.values())]
        values = {}
        for k in keys:
            vals = [per_image[s][k] for s in sorted(per_image) if k in per_image[s]]
            values[k] = math.fsum(vals) / len(vals)
        return cls(dataset_id, task, values, dict(sorted(per_image.items())), **kwargs)

    def to_text(self) -> str:
        lines = [f"dataset: {self.dataset_id}", f"task: {self.task}", f"method: {self.method}",
                 f"images: {len(self.per_image)}", f"excluded: {len(self.excluded)}"]
        lines += [f"{k}: {self.values[k]:.6f}" for k in METRIC_KEYS if k in self.values]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        unknown = set(d.get("values", {})) - set(METRIC_KEYS)
        if unknown:
            raise ValueError(f"unknown metric key(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def per_image_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sample_id", "metric", "value"])
        for sid, vals in self.per_image.items():
            for k in METRIC_KEYS:
                if k in vals:
                    writer.writerow([sid, k, repr(vals[k])])
        return buf.getvalue()

    def headline(self) -> str:
        keys = TASK_METRICS.get(self.task, METRIC_KEYS)
        parts = [f"{k}={self.values[k]:.4f}" for k in keys if k in self.values]
        return f"{self.dataset_id} [{self.task}] " + " ".join(parts)

    def write(self, out_dir: Union[str, Path], stem: str = "report") -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"text": out_dir / f"{stem}.txt", "json": out_dir / f"{stem}.json",
                 "csv": out_dir / f"{stem}_per_image.csv"}
        paths["text"].write_text(self.to_text())
        paths["json"].write_text(self.to_json())
        paths["csv"].write_text(self.per_image_csv())
        return paths


def resize_prediction(pred: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a probability map to ``shape`` (no-op if already that size)."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape == tuple(shape):
        return pred
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(pred)[None, None]
    out = F.interpolate(t, size=tuple(shape), mode="bilinear", align_corners=False)
    return out[0, 0].numpy().clip(0.0, 1.0)


def evaluate_dataset(predictor: Callable, manifest, task: str, split: Optional[str] = "test",
                     metrics: Union[str, Sequence[str], None] = None, workers: int = 1) -> MetricReport:
    """Score ``predictor(record) -> [h, w] probabilities`` over a manifest split.

    ``metrics`` defaults to the task's metric set; "all" computes every metric.
    Records whose mask cannot be found are excluded and listed in the report.
    """
    from .data import EmptyDatasetError, load_mask

    if metrics is None:
        if task not in TASK_METRICS:
            raise ValueError(f"unknown task {task!r}")
        keys = TASK_METRICS[task]
    elif metrics == "all":
        keys = METRIC_KEYS
    else:
        keys = tuple(metrics)
        unknown = set(keys) - set(METRIC_KEYS)
        if unknown:
            raise ValueError(f"unknown metric key(s): {', '.join(sorted(unknown))}")
    records = sorted((r for r in manifest.records if split is None or r.split == split),
                     key=lambda r: r.sample_id)
    if not records:
        raise EmptyDatasetError(f"dataset {manifest.dataset_id} has no {split or ''} samples")
    excluded = []
    usable = []
    for r in records:
        if r.mask_path is None or not Path(r.mask_path).is_file():
            excluded.append(r.sample_id)
        else:
            usable.append(r)
    instance = task == "cell"

    def score(record):
        gt = load_mask(record.mask_path, instance=instance)
        pred = resize_prediction(predictor(record), gt.shape)
        vals = image_metrics(pred, gt, keys)
        return record.sample_id, vals, bool(gt.all() or not gt.any())

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(score, usable))
    else:
        results = [score(r) for r in usable]
    per_image = {sid: vals for sid, vals, _ in results}
    single_class = sorted(sid for sid, _, flag in results if flag)
    flags = {"e_phi": "mean over 256 thresholds", "dice_iou_averaging": "per-image mean",
             "threshold": 0.5, "single_class_gt": single_class}
    if not per_image:
        raise EmptyDatasetError(f"dataset {manifest.dataset_id}: every sample was excluded")
    return MetricReport.aggregate(manifest.dataset_id, task, per_image, excluded=excluded, flags=flags)
