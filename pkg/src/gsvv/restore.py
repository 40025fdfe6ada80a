"""Reference-guided color restoration.

Deterministic local-statistics transfer standing in for a learned
restorer: per channel and pixel, the distorted image's local mean/std
(over guided pixels) is replaced by the aligned reference's, leaving
structure intact while correcting color.  Pixels whose window contains
no guided sample pass through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

EPS = 1e-4
DEFAULT_WINDOW = 8


@dataclass
class RestoreInputs:
    distorted: np.ndarray      # (H, W, 3) client render
    aligned_ref: np.ndarray    # (H, W, 3) PRPA output
    guidance_mask: np.ndarray  # (H, W) bool, trustworthy reference pixels
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.distorted.shape != self.aligned_ref.shape:
            raise ValidationError(
                f"shape mismatch: distorted {self.distorted.shape} vs "
                f"reference {self.aligned_ref.shape}"
            )
        if self.guidance_mask.shape != self.distorted.shape[:2]:
            raise ValidationError("guidance mask shape mismatch")
        if self.window < 1:
            raise ValidationError(f"window half-size must be >= 1, got {self.window}")


def _box_sum(arr: np.ndarray, w: int) -> np.ndarray:
    """Sum over the (2w+1)^2 window around each pixel, clipped at borders."""
    h, ww = arr.shape[:2]
    sat = np.zeros((h + 1, ww + 1) + arr.shape[2:], dtype=np.float64)
    sat[1:, 1:] = np.cumsum(np.cumsum(arr, axis=0), axis=1)
    ys = np.arange(h)
    xs = np.arange(ww)
    y0 = np.clip(ys - w, 0, h)
    y1 = np.clip(ys + w + 1, 0, h)
    x0 = np.clip(xs - w, 0, ww)
    x1 = np.clip(xs + w + 1, 0, ww)
    return (
        sat[np.ix_(y1, x1)] - sat[np.ix_(y0, x1)]
        - sat[np.ix_(y1, x0)] + sat[np.ix_(y0, x0)]
    )


def restore(inputs: RestoreInputs) -> np.ndarray:
    distorted = np.asarray(inputs.distorted, dtype=np.float64)
    reference = np.asarray(inputs.aligned_ref, dtype=np.float64)
    mask = inputs.guidance_mask.astype(np.float64)
    w = inputs.window

    count = _box_sum(mask, w)
    guided = count > 0
    safe_count = np.maximum(count, 1.0)

    mask3 = mask[:, :, None]
    sum_d = _box_sum(distorted * mask3, w)
    sum_r = _box_sum(reference * mask3, w)
    sum_d2 = _box_sum(distorted**2 * mask3, w)
    sum_r2 = _box_sum(reference**2 * mask3, w)

    mean_d = sum_d / safe_count[:, :, None]
    mean_r = sum_r / safe_count[:, :, None]
    var_d = np.maximum(sum_d2 / safe_count[:, :, None] - mean_d**2, 0.0)
    var_r = np.maximum(sum_r2 / safe_count[:, :, None] - mean_r**2, 0.0)
    std_d = np.sqrt(var_d)
    std_r = np.sqrt(var_r)

    transferred = (distorted - mean_d) * std_r / np.maximum(std_d, EPS) + mean_r
    out = np.where(guided[:, :, None], transferred, distorted)
    return np.clip(out, 0.0, 1.0)
