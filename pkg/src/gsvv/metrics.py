"""Image quality metrics and run-level reporting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ValidationError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
# radius int(truncate * sigma + 0.5) == (SSIM_WINDOW - 1) // 2
SSIM_TRUNCATE = 3.5


def rgb_to_gray(image: np.ndarray) -> np.ndarray:
    """Rec.601 luma."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for images in [0, 1]; identical images give inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW,
         sigma: float = SSIM_SIGMA, k1: float = SSIM_K1,
         k2: float = SSIM_K2) -> float:
    """Gaussian-weighted SSIM mean on Rec.601 grayscale, data range 1."""
    a = rgb_to_gray(a)
    b = rgb_to_gray(b)
    if a.shape != b.shape:
        raise ValidationError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ValidationError(
            f"ssim: image {a.shape} smaller than the {window}-pixel window"
        )
    filt = lambda x: gaussian_filter(x, sigma=sigma, truncate=SSIM_TRUNCATE)
    ua = filt(a)
    ub = filt(b)
    uaa = filt(a * a)
    ubb = filt(b * b)
    uab = filt(a * b)
    va = uaa - ua * ua
    vb = ubb - ub * ub
    vab = uab - ua * ub
    c1 = k1**2
    c2 = k2**2
    score = ((2 * ua * ub + c1) * (2 * vab + c2)) / (
        (ua * ua + ub * ub + c1) * (va + vb + c2)
    )
    pad = (window - 1) // 2
    return float(score[pad:-pad, pad:-pad].mean())


@dataclass
class QualityReport:
    """Per-frame quality and transport numbers plus aggregates."""

    frames: list[dict] = field(default_factory=list)
    bootstrap_bytes: int = 0
    notes: list[str] = field(default_factory=list)

    def add_frame(self, **kwargs) -> None:
        self.frames.append(dict(kwargs))

    def column(self, name: str) -> np.ndarray:
        return np.array([f[name] for f in self.frames], dtype=np.float64)

    def aggregate(self, name: str) -> dict:
        col = self.column(name)
        finite = col[np.isfinite(col)]
        if len(finite) == 0:
            finite = col
        return {
            "mean": float(np.mean(finite)),
            "min": float(np.min(finite)),
            "max": float(np.max(finite)),
        }

    def write_csv(self, path) -> None:
        if not self.frames:
            raise ValidationError("report has no frames")
        columns = list(self.frames[0].keys())
        with open(path, "w") as fh:
            fh.write(",".join(columns) + "\n")
            for row in self.frames:
                fh.write(",".join(_format_cell(row[c]) for c in columns) + "\n")


def _format_cell(value) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return f"{value:.6f}"
    return str(value)
