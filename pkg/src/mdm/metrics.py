"""Saliency evaluation: Average Drop/Increase, Deletion/Insertion AUC, mask overlap.

Scores are class probabilities from ``model.predict_proba(image)``; any
object with that method can be evaluated, which keeps the curve machinery
testable against analytic scorers.  Saliency maps are H×W arrays where a
higher value means more important; only their ordering matters.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray
    source: str = "external"

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass
class Curve:
    fractions: np.ndarray
    scores: np.ndarray
    auc: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["fraction", "score"])
            for f, s in zip(self.fractions, self.scores):
                writer.writerow([repr(float(f)), repr(float(s))])


@dataclass
class MetricReport:
    average_drop: float
    average_increase: float
    deletion_auc: float
    insertion_auc: float
    dice: float
    iou: float
    ppv: float
    sensitivity: float
    per_image: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _saliency(s) -> np.ndarray:
    arr = np.asarray(s, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"saliency must be H×W, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("saliency contains non-finite values")
    return arr


def percentile_value(values, q: float) -> float:
    """Lower nearest-rank percentile: sorted ascending value at index ``floor(q*n/100)``."""
    if not 0 <= q < 100:
        raise ValueError(f"percentile must lie in [0, 100), got {q}")
    flat = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    idx = min(int(math.floor(q * flat.size / 100 + 1e-9)), flat.size - 1)
    return float(flat[idx])


def binary_from_percentile(s, q: float) -> np.ndarray:
    """1 where the saliency reaches its ``q``-th percentile; ties at the cut are kept."""
    if not 0 < q < 100:
        raise ValueError(f"percentile must lie in (0, 100), got {q}")
    arr = _saliency(s)
    return (arr >= percentile_value(arr, q)).astype(np.float64)


def explained_map(x, s, q: float) -> np.ndarray:
    """Keep the image only where saliency is at or above its ``q``-th percentile."""
    arr = _saliency(s)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != arr.shape:
        raise ValueError(f"saliency {arr.shape} does not match image {x.shape}")
    keep = arr >= percentile_value(arr, q)
    return x * keep


def _target(model, image, target: int | None) -> int:
    return int(np.argmax(model.predict_proba(image))) if target is None else int(target)


def average_drop_from_scores(base: Sequence[float], masked: Sequence[float]) -> float:
    base = np.asarray(base, dtype=np.float64)
    masked = np.asarray(masked, dtype=np.float64)
    if (base <= 0).any():
        raise ValueError("base scores must be positive")
    return float(np.mean(np.maximum(0.0, base - masked) / base) * 100.0)


def average_increase_from_scores(base: Sequence[float], masked: Sequence[float]) -> float:
    base = np.asarray(base, dtype=np.float64)
    masked = np.asarray(masked, dtype=np.float64)
    if (base <= 0).any():
        raise ValueError("base scores must be positive")
    return float(np.mean(base < masked))


def _paired_scores(model, images, saliencies, q, targets):
    if len(images) != len(saliencies):
        raise ValueError("one saliency map per image required")
    targets = [None] * len(images) if targets is None else list(targets)
    base, masked = [], []
    for x, s, t in zip(images, saliencies, targets):
        c = _target(model, x, t)
        base.append(model.predict_proba(x)[c])
        masked.append(model.predict_proba(explained_map(x, s, q))[c])
    return base, masked


def average_drop(model, images, saliencies, q: float = 50.0, targets=None) -> float:
    """Mean relative drop (percent) of the class score when only salient pixels are kept."""
    return average_drop_from_scores(*_paired_scores(model, images, saliencies, q, targets))


def average_increase(model, images, saliencies, q: float = 50.0, targets=None) -> float:
    """Fraction of images whose class score strictly rises on the explained map."""
    return average_increase_from_scores(*_paired_scores(model, images, saliencies, q, targets))


def trapezoid_auc(fractions, scores) -> float:
    f = np.asarray(fractions, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    return float(np.sum((f[1:] - f[:-1]) * (s[1:] + s[:-1]) / 2.0))


def _order(s) -> np.ndarray:
    # descending saliency; stable so equal values keep raster order
    return np.argsort(-_saliency(s).reshape(-1), kind="stable")


def _curve(model, x, s, target, steps, insert, baseline):
    if steps < 2:
        raise ValueError("curves need at least 2 steps")
    x = np.asarray(x, dtype=np.float64)
    arr = _saliency(s)
    if x.shape[-2:] != arr.shape:
        raise ValueError(f"saliency {arr.shape} does not match image {x.shape}")
    base = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    c = _target(model, x, target)
    order = _order(arr)
    n = order.size
    h, w = arr.shape
    fractions, scores = [], []
    for j in range(steps + 1):
        k = (j * n) // steps
        chosen = np.zeros(n, dtype=bool)
        chosen[order[:k]] = True
        chosen = chosen.reshape(h, w)
        if insert:
            img = np.where(chosen, x, base)
        else:
            img = np.where(chosen, base, x)
        fractions.append(j / steps)
        scores.append(float(model.predict_proba(img)[c]))
    fr, sc = np.array(fractions), np.array(scores)
    return Curve(fr, sc, trapezoid_auc(fr, sc))


def deletion_curve(model, x, s, target: int | None = None, steps: int = 50, baseline=None) -> Curve:
    """Class score as pixels are replaced by the baseline, most salient first."""
    return _curve(model, x, s, target, steps, insert=False, baseline=baseline)


def insertion_curve(model, x, s, target: int | None = None, steps: int = 50, baseline=None) -> Curve:
    """Class score as pixels are restored onto the baseline, most salient first."""
    return _curve(model, x, s, target, steps, insert=True, baseline=baseline)


def blurred_baseline(x, sigma: float = 5.0) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    x = np.asarray(x, dtype=np.float64)
    return np.stack([gaussian_filter(ch, sigma) for ch in x])


def overlap_scores(pred, gt) -> tuple[float, float, float, float]:
    """(dice, iou, ppv, sensitivity) of a predicted binary mask against ground truth."""
    p = np.asarray(pred) > 0
    g = np.asarray(gt) > 0
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    n_g = int(g.sum())
    if n_g == 0:
        raise ValueError("ground truth mask is empty")
    n_p = int(p.sum())
    inter = int((p & g).sum())
    union = int((p | g).sum())
    dice = 2.0 * inter / (n_p + n_g)
    iou = inter / union
    ppv = inter / n_p if n_p else 0.0
    sens = inter / n_g
    return dice, iou, ppv, sens


def random_saliency(seed: int, h: int, w: int) -> SaliencyMap:
    return SaliencyMap(np.random.default_rng(seed).uniform(size=(h, w)), "random")


def evaluate_image(model, x, s, gt, percentile: float = 90.0, explain_percentile: float = 50.0,
                   steps: int = 50, target: int | None = None, baseline=None) -> dict:
    """All per-image quantities for one saliency map."""
    c = _target(model, x, target)
    base = model.predict_proba(x)[c]
    kept = model.predict_proba(explained_map(x, s, explain_percentile))[c]
    dele = deletion_curve(model, x, s, c, steps, baseline)
    ins = insertion_curve(model, x, s, c, steps, baseline)
    dice, iou, ppv, sens = overlap_scores(binary_from_percentile(s, percentile), gt)
    return {
        "target": c,
        "base_score": float(base),
        "explained_score": float(kept),
        "drop": float(max(0.0, base - kept) / base * 100.0),
        "increase": bool(base < kept),
        "deletion_auc": dele.auc,
        "insertion_auc": ins.auc,
        "dice": dice,
        "iou": iou,
        "ppv": ppv,
        "sensitivity": sens,
        "deletion_curve": dele,
        "insertion_curve": ins,
    }


_CURVE_KEYS = ("deletion_curve", "insertion_curve")


def aggregate(rows: Sequence[dict], names: Sequence[str] | None = None) -> MetricReport:
    if not rows:
        raise ValueError("nothing to aggregate")
    names = [str(i) for i in range(len(rows))] if names is None else list(names)

    def avg(key):
        return float(np.mean([r[key] for r in rows]))

    per_image = []
    for name, r in zip(names, rows):
        per_image.append({"name": name, **{k: v for k, v in r.items() if k not in _CURVE_KEYS}})
    return MetricReport(
        average_drop=avg("drop"),
        average_increase=float(np.mean([r["increase"] for r in rows])),
        deletion_auc=avg("deletion_auc"),
        insertion_auc=avg("insertion_auc"),
        dice=avg("dice"),
        iou=avg("iou"),
        ppv=avg("ppv"),
        sensitivity=avg("sensitivity"),
        per_image=per_image,
    )


def overlap_sweep(s, gt, percentiles=range(70, 100)) -> list[tuple[float, float, float, float, float]]:
    """(percentile, dice, iou, ppv, sensitivity) across a range of cut percentiles."""
    return [(float(q), *overlap_scores(binary_from_percentile(s, q), gt)) for q in percentiles]
