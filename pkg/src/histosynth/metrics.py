"""Evaluation metrics: L1/PSNR/SSIM for translation quality, per-class
Dice/sensitivity/specificity for segmentation, and mean/std aggregation.

Images are 2-D float arrays in [0, 1]; masks are integer label maps.
All aggregation uses the population standard deviation.
"""
from dataclasses import dataclass

import numpy as np

from .errors import EmptyList, ImageTooSmall, ShapeMismatch

PSNR_CAP_DB = 100.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_pair(reference, candidate):
    reference = np.asarray(reference, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    if reference.shape != candidate.shape:
        raise ShapeMismatch(
            f"image pair shapes differ: {reference.shape} vs {candidate.shape}"
        )
    return reference, candidate


def l1(reference, candidate) -> float:
    """Mean absolute pixel difference."""
    reference, candidate = _check_pair(reference, candidate)
    return float(np.mean(np.abs(reference - candidate)))


def psnr(reference, candidate, max_val: float = 1.0, cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB, capped so identical images stay finite."""
    reference, candidate = _check_pair(reference, candidate)
    mse = float(np.mean((reference - candidate) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(max_val ** 2 / mse))


def ssim(reference, candidate, window: int = 8, c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """Structural similarity averaged over non-overlapping ``window`` x ``window`` tiles.

    Per-tile statistics use flat (mean-pooling) windows and population
    variance; partial tiles at the right/bottom edges are dropped. Constants
    default to the standard (0.01 L)^2, (0.03 L)^2 with dynamic range L = 1.
    """
    reference, candidate = _check_pair(reference, candidate)
    h, w = reference.shape
    if h < window or w < window:
        raise ImageTooSmall(f"image {h}x{w} smaller than SSIM window {window}")
    th, tw = h // window, w // window
    x = reference[: th * window, : tw * window].reshape(th, window, tw, window)
    y = candidate[: th * window, : tw * window].reshape(th, window, tw, window)
    x = x.transpose(0, 2, 1, 3).reshape(th * tw, window * window)
    y = y.transpose(0, 2, 1, 3).reshape(th * tw, window * window)

    mx = x.mean(axis=1)
    my = y.mean(axis=1)
    vx = ((x - mx[:, None]) ** 2).mean(axis=1)
    vy = ((y - my[:, None]) ** 2).mean(axis=1)
    cov = ((x - mx[:, None]) * (y - my[:, None])).mean(axis=1)

    per_tile = ((2 * mx * my + c1) * (2 * cov + c2)) / (
        (mx ** 2 + my ** 2 + c1) * (vx + vy + c2)
    )
    return float(per_tile.mean())


@dataclass
class ClassConfusion:
    """One-vs-rest pixel counts for a single class."""

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, gt, cls: int) -> ClassConfusion:
    """One-vs-rest confusion counts for class ``cls``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred == cls
    g = gt == cls
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    tn = int(np.sum(~p & ~g))
    return ClassConfusion(tp=tp, fp=fp, fn=fn, tn=tn)


def dice(c: ClassConfusion) -> float:
    """Dice overlap 2tp/(2tp+fp+fn).

    Convention for empty classes: both prediction and ground truth empty -> 1;
    only one of them empty -> 0.
    """
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return 2 * c.tp / denom


def sensitivity(c: ClassConfusion) -> float:
    """Recall tp/(tp+fn); 1 when the ground truth has no positives."""
    denom = c.tp + c.fn
    if denom == 0:
        return 1.0
    return c.tp / denom


def specificity(c: ClassConfusion) -> float:
    """True-negative rate tn/(tn+fp); 1 when the ground truth has no negatives."""
    denom = c.tn + c.fp
    if denom == 0:
        return 1.0
    return c.tn / denom


def aggregate(values) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation of a non-empty list."""
    values = list(values)
    if not values:
        raise EmptyList("cannot aggregate an empty list")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


def format_mean_std(mean: float, std: float, digits: int = 3) -> str:
    """Render a metric as e.g. ``0.736 ± 0.005``."""
    return f"{mean:.{digits}f} ± {std:.{digits}f}"
