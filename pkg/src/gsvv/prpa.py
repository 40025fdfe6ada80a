"""Post-render perspective alignment.

The client unprojects each of its pixels with its own depth map,
reprojects into the reference camera and samples the reference color.
Pixels whose projected reference depth exceeds the minimum depth landing
on the same reference pixel are occluded in the reference view; an
iterative erosion pass replaces them with the average color of nearby
trusted pixels (valid pixels first, then previously filled ones), each
iteration reading only pre-iteration state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .renderer import Camera

DEFAULT_KERNEL = 2


@dataclass
class AlignmentInputs:
    reference: np.ndarray        # (Hr, Wr, 3) server-rendered reference
    depth: np.ndarray            # (H, W) client depth map, camera z
    cam_client: Camera
    cam_reference: Camera
    kernel: int = DEFAULT_KERNEL  # erosion window half-size
    depth_threshold: float = 0.1  # occlusion threshold, world units
    sampling: str = "bilinear"    # or "nearest"

    def __post_init__(self):
        if self.kernel < 1:
            raise ValidationError(f"kernel half-size must be >= 1, got {self.kernel}")
        if self.depth_threshold <= 0:
            raise ValidationError("depth threshold must be positive")
        if self.sampling not in ("bilinear", "nearest"):
            raise ValidationError(f"unknown sampling mode {self.sampling!r}")


@dataclass
class AlignmentOutput:
    aligned: np.ndarray          # (H, W, 3) reference warped into the client view
    occluded_mask: np.ndarray    # detected occlusions (before erosion)
    valid_mask: np.ndarray       # hit pixels with consistent depth
    uncovered_mask: np.ndarray   # no usable reference mapping
    erosion_iterations: int = 0
    pixels_filled: int = 0
    fallback_used: bool = False


def _bilinear_sample(image: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Sample image at continuous (column i, row j) coordinates."""
    h, w = image.shape[:2]
    i0 = np.clip(np.floor(i).astype(np.int64), 0, w - 1)
    j0 = np.clip(np.floor(j).astype(np.int64), 0, h - 1)
    i1 = np.minimum(i0 + 1, w - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    fi = np.clip(i - i0, 0.0, 1.0)[..., None]
    fj = np.clip(j - j0, 0.0, 1.0)[..., None]
    top = image[j0, i0] * (1 - fi) + image[j0, i1] * fi
    bot = image[j1, i0] * (1 - fi) + image[j1, i1] * fi
    return top * (1 - fj) + bot * fj


def align(inputs: AlignmentInputs, erode: bool = True) -> AlignmentOutput:
    ref = np.asarray(inputs.reference, dtype=np.float64)
    depth = np.asarray(inputs.depth, dtype=np.float64)
    h, w = depth.shape
    hr, wr = ref.shape[:2]
    cam_l = inputs.cam_client
    cam_r = inputs.cam_reference

    vs, us = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    has_depth = depth > 0

    # client camera coordinates of every pixel at its rendered depth
    xl = (us - cam_l.cx) / cam_l.fx * depth
    yl = (vs - cam_l.cy) / cam_l.fy * depth
    pts_l = np.stack([xl, yl, depth], axis=-1)

    # into the reference camera: X_r = R_r R_l^-1 (X_l - t_l) + t_r
    m = cam_r.R @ cam_l.R.T
    pts_r = (pts_l - cam_l.t) @ m.T + cam_r.t
    depth_ref = pts_r[..., 2]

    with np.errstate(divide="ignore", invalid="ignore"):
        i = cam_r.fx * pts_r[..., 0] / depth_ref + cam_r.cx
        j = cam_r.fy * pts_r[..., 1] / depth_ref + cam_r.cy

    eps = 1e-9  # keep boundary pixels covered despite roundoff
    covered = (
        has_depth
        & (depth_ref > 0)
        & (i >= -eps) & (i <= wr - 1 + eps)
        & (j >= -eps) & (j <= hr - 1 + eps)
    )
    i = np.clip(i, 0.0, wr - 1.0)
    j = np.clip(j, 0.0, hr - 1.0)

    aligned = np.zeros((h, w, 3), dtype=np.float64)
    if covered.any():
        if inputs.sampling == "nearest":
            ii = np.rint(i[covered]).astype(np.int64)
            jj = np.rint(j[covered]).astype(np.int64)
            aligned[covered] = ref[jj, ii]
        else:
            aligned[covered] = _bilinear_sample(ref, i[covered], j[covered])

    # per-reference-pixel hit counts and minimum projected depth,
    # nearest-pixel binning of the continuous coordinates
    occluded = np.zeros((h, w), dtype=bool)
    valid = np.zeros((h, w), dtype=bool)
    if covered.any():
        bi = np.rint(i[covered]).astype(np.int64)
        bj = np.rint(j[covered]).astype(np.int64)
        bins = bj * wr + bi
        min_depth = np.full(hr * wr, np.inf, dtype=np.float64)
        np.minimum.at(min_depth, bins, depth_ref[covered])
        pulled_min = min_depth[bins]
        mismatch = np.abs(depth_ref[covered] - pulled_min) > inputs.depth_threshold
        occluded[covered] = mismatch
        valid[covered] = ~mismatch

    uncovered = ~covered
    out = AlignmentOutput(
        aligned=aligned,
        occluded_mask=occluded,
        valid_mask=valid,
        uncovered_mask=uncovered,
    )
    if erode and occluded.any():
        filled, iters, n_filled, fallback = erode_errors(
            aligned, valid, occluded, inputs.kernel
        )
        out.aligned = filled
        out.erosion_iterations = iters
        out.pixels_filled = n_filled
        out.fallback_used = fallback
    return out


def _dilate8(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    out[1:, 1:] |= mask[:-1, :-1]
    out[:-1, :-1] |= mask[1:, 1:]
    out[1:, :-1] |= mask[:-1, 1:]
    out[:-1, 1:] |= mask[1:, :-1]
    return out


def erode_errors(aligned: np.ndarray, valid_mask: np.ndarray,
                 occluded_mask: np.ndarray, kernel: int):
    """Fill occluded pixels from the average color of trusted neighbors.

    While any occluded pixel remains, every boundary pixel of the
    occluded set that has a trusted color anchors a (2k+1)^2 window:
    the mean of the window's trusted pixels is written into the window's
    occluded pixels, which leave the occluded set and become trusted for
    later iterations.  Reads use pre-iteration state only; contested
    pixels take the value of their first anchor in row-major order.

    Returns (image, iterations, pixels_filled, fallback_used); when no
    trusted pixel is reachable the remainder is filled with the mean
    trusted (or mean frame) color and the fallback flag is set.
    """
    h, w = occluded_mask.shape
    out = np.array(aligned, dtype=np.float64, copy=True)
    remaining = occluded_mask.copy()
    trusted = valid_mask & ~remaining
    k = kernel
    iterations = 0
    pixels_filled = 0
    fallback = False
    max_iterations = h + w

    while remaining.any():
        ring = _dilate8(remaining) & ~remaining
        anchors = ring & trusted
        if not anchors.any() or iterations >= max_iterations:
            if trusted.any():
                fill = out[trusted].mean(axis=0)
            else:
                fill = out.reshape(-1, out.shape[-1]).mean(axis=0)
            pixels_filled += int(remaining.sum())
            out[remaining] = fill
            remaining[:, :] = False
            fallback = True
            break
        prev_out = out.copy()
        prev_trusted = trusted.copy()
        ys, xs = np.nonzero(anchors)
        for y, x in zip(ys, xs):
            y0, y1 = max(y - k, 0), min(y + k, h - 1)
            x0, x1 = max(x - k, 0), min(x + k, w - 1)
            win_remaining = remaining[y0:y1 + 1, x0:x1 + 1]
            if not win_remaining.any():
                continue
            win_trusted = prev_trusted[y0:y1 + 1, x0:x1 + 1]
            color = prev_out[y0:y1 + 1, x0:x1 + 1][win_trusted].mean(axis=0)
            out[y0:y1 + 1, x0:x1 + 1][win_remaining] = color
            trusted[y0:y1 + 1, x0:x1 + 1][win_remaining] = True
            pixels_filled += int(win_remaining.sum())
            win_remaining[:, :] = False
        iterations += 1
    return out, iterations, pixels_filled, fallback
