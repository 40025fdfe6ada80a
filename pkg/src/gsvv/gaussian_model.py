"""Gaussian scene types, differential video frames and frame file I/O.

A frame is stored struct-of-arrays: positions, log-scales, quaternions
(w, x, y, z), logit opacities and spherical-harmonics coefficients.
Scale and opacity stay in pre-activation (log / logit) space; the
renderer applies exp / sigmoid.

SH layout: for degree L there are (L+1)^2 coefficients per channel,
stored coefficient-major as (N, 3*(L+1)^2) so that the block for SH
level l occupies columns [3*l^2, 3*(l+1)^2).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError

FRAME_MAGIC = b"GSVV"
DIFF_MAGIC = b"GSVD"
FORMAT_VERSION = 1
TEXT_HEADER = "GSVV-TEXT"

DEFAULT_SH_DEGREE = 3


def sh_coeff_count(degree: int) -> int:
    """Total SH floats per Gaussian (3 channels)."""
    return 3 * (degree + 1) ** 2


def sh_level_slice(level: int) -> slice:
    """Column slice of the SH block belonging to one SH level."""
    return slice(3 * level**2, 3 * (level + 1) ** 2)


@dataclass
class Gaussian:
    """A single Gaussian, mostly useful for tests and file round-trips."""

    position: np.ndarray   # (3,) world units
    scale: np.ndarray      # (3,) log-scale
    rotation: np.ndarray   # (4,) quaternion, w first
    opacity: float         # logit
    sh: np.ndarray         # (3*(L+1)^2,)


@dataclass
class GaussianFrame:
    """Dense frame; gaussian_id is the row index."""

    frame_index: int
    positions: np.ndarray   # (N, 3) float32
    scales: np.ndarray      # (N, 3) float32
    rotations: np.ndarray   # (N, 4) float32
    opacities: np.ndarray   # (N,)   float32
    sh: np.ndarray          # (N, 3*(L+1)^2) float32
    sh_degree: int = DEFAULT_SH_DEGREE

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float32)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float32)
        self.opacities = np.ascontiguousarray(self.opacities, dtype=np.float32)
        self.sh = np.ascontiguousarray(self.sh, dtype=np.float32)
        validate_frame(self)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def gaussian(self, gid: int) -> Gaussian:
        return Gaussian(
            position=self.positions[gid].copy(),
            scale=self.scales[gid].copy(),
            rotation=self.rotations[gid].copy(),
            opacity=float(self.opacities[gid]),
            sh=self.sh[gid].copy(),
        )

    def copy(self, frame_index=None) -> "GaussianFrame":
        return GaussianFrame(
            frame_index=self.frame_index if frame_index is None else frame_index,
            positions=self.positions.copy(),
            scales=self.scales.copy(),
            rotations=self.rotations.copy(),
            opacities=self.opacities.copy(),
            sh=self.sh.copy(),
            sh_degree=self.sh_degree,
        )


@dataclass
class DifferentialFrame:
    """Updates for the Gaussians that changed since the previous frame."""

    frame_index: int
    gaussian_ids: np.ndarray  # (M,) int64, ids into the reconstructed previous frame
    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    sh_degree: int = DEFAULT_SH_DEGREE

    def __post_init__(self):
        self.gaussian_ids = np.ascontiguousarray(self.gaussian_ids, dtype=np.int64)
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float32)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float32)
        self.opacities = np.ascontiguousarray(self.opacities, dtype=np.float32)
        self.sh = np.ascontiguousarray(self.sh, dtype=np.float32)
        ids = self.gaussian_ids
        if len(np.unique(ids)) != len(ids):
            raise ValidationError(
                f"duplicate gaussian_ids in differential frame {self.frame_index}"
            )

    def __len__(self) -> int:
        return self.gaussian_ids.shape[0]


def validate_frame(frame: GaussianFrame) -> None:
    n = frame.positions.shape[0]
    expected_sh = sh_coeff_count(frame.sh_degree)
    shapes = {
        "positions": (n, 3),
        "scales": (n, 3),
        "rotations": (n, 4),
        "opacities": (n,),
        "sh": (n, expected_sh),
    }
    for name, shape in shapes.items():
        arr = getattr(frame, name)
        if arr.shape != shape:
            raise ValidationError(
                f"frame {frame.frame_index}: {name} has shape {arr.shape}, expected {shape}"
            )
    for name in shapes:
        arr = getattr(frame, name)
        if not np.all(np.isfinite(arr)):
            bad = int(np.nonzero(~np.isfinite(arr).reshape(n, -1).all(axis=1))[0][0])
            raise ValidationError(
                f"frame {frame.frame_index}: non-finite {name} at gaussian_id {bad}"
            )
    norms = np.linalg.norm(frame.rotations, axis=1)
    if n and norms.min() < 1e-8:
        bad = int(np.argmin(norms))
        raise ValidationError(
            f"frame {frame.frame_index}: zero-norm quaternion at gaussian_id {bad}"
        )


def apply_differential(base: GaussianFrame, diff: DifferentialFrame) -> GaussianFrame:
    """Return a new frame equal to ``base`` with ``diff``'s updates applied."""
    n = len(base)
    ids = diff.gaussian_ids
    if len(ids) and (ids.min() < 0 or ids.max() >= n):
        bad = int(ids[(ids < 0) | (ids >= n)][0])
        raise ValidationError(
            f"differential frame {diff.frame_index}: gaussian_id {bad} outside [0, {n})"
        )
    out = base.copy(frame_index=diff.frame_index)
    out.positions[ids] = diff.positions
    out.scales[ids] = diff.scales
    out.rotations[ids] = diff.rotations
    out.opacities[ids] = diff.opacities
    out.sh[ids] = diff.sh
    return out


def diff_frames(prev: GaussianFrame, next_frame: GaussianFrame, epsilon: float = 0.0) -> DifferentialFrame:
    """Differential update taking ``prev`` to ``next_frame``.

    Contains exactly the ids where some attribute differs by more than
    ``epsilon``; epsilon 0 gives the exact inverse of apply_differential.
    """
    if len(prev) != len(next_frame):
        raise ValidationError(
            f"frame size mismatch: {len(prev)} vs {len(next_frame)}"
        )
    changed = np.zeros(len(prev), dtype=bool)
    for name in ("positions", "scales", "rotations", "opacities", "sh"):
        a = getattr(prev, name)
        b = getattr(next_frame, name)
        delta = np.abs(a.astype(np.float64) - b.astype(np.float64))
        if delta.ndim == 1:
            delta = delta[:, None]
        changed |= (delta > epsilon).any(axis=1)
    ids = np.nonzero(changed)[0].astype(np.int64)
    return DifferentialFrame(
        frame_index=next_frame.frame_index,
        gaussian_ids=ids,
        positions=next_frame.positions[ids],
        scales=next_frame.scales[ids],
        rotations=next_frame.rotations[ids],
        opacities=next_frame.opacities[ids],
        sh=next_frame.sh[ids],
        sh_degree=next_frame.sh_degree,
    )


# ---------------------------------------------------------------------------
# file formats
#
# Binary keyframe ("GSVV"): magic, version u32, count u64, sh_degree u8,
# then per Gaussian float32 LE records in field order
# position(3) scale(3) rotation(4) opacity(1) sh(3*(L+1)^2).
#
# Binary differential ("GSVD"): magic, version u32, frame_index u32,
# count u64, sh_degree u8, then per update: gaussian_id u64 followed by
# the same float32 record.
#
# Text variant: header line "GSVV-TEXT <version> <count> <sh_degree>",
# then one Gaussian per line, attributes space-separated in field order.
# ---------------------------------------------------------------------------

def _record_width(sh_degree: int) -> int:
    return 3 + 3 + 4 + 1 + sh_coeff_count(sh_degree)


def _frame_from_records(frame_index, records, sh_degree) -> GaussianFrame:
    nsh = sh_coeff_count(sh_degree)
    return GaussianFrame(
        frame_index=frame_index,
        positions=records[:, 0:3],
        scales=records[:, 3:6],
        rotations=records[:, 6:10],
        opacities=records[:, 10],
        sh=records[:, 11:11 + nsh],
        sh_degree=sh_degree,
    )


def _records_from_arrays(positions, scales, rotations, opacities, sh) -> np.ndarray:
    return np.hstack([
        positions.astype(np.float32),
        scales.astype(np.float32),
        rotations.astype(np.float32),
        opacities.astype(np.float32)[:, None],
        sh.astype(np.float32),
    ])


def save_frame(frame: GaussianFrame, path) -> None:
    records = _records_from_arrays(
        frame.positions, frame.scales, frame.rotations, frame.opacities, frame.sh
    )
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC)
        fh.write(struct.pack("<IQB", FORMAT_VERSION, len(frame), frame.sh_degree))
        fh.write(records.astype("<f4").tobytes())


def load_frame(path, frame_index: int = 0) -> GaussianFrame:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(TEXT_HEADER.encode())] == TEXT_HEADER.encode():
        return _load_text_frame(data, frame_index)
    if data[:4] != FRAME_MAGIC:
        raise ParseError(f"{path}: bad magic {data[:4]!r}", offset=0)
    header_size = 4 + struct.calcsize("<IQB")
    if len(data) < header_size:
        raise ParseError(f"{path}: truncated header", offset=len(data))
    version, count, sh_degree = struct.unpack("<IQB", data[4:header_size])
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}", offset=4)
    width = _record_width(sh_degree)
    expected = header_size + count * width * 4
    if len(data) != expected:
        raise ParseError(
            f"{path}: expected {expected} bytes for {count} Gaussians, got {len(data)}",
            offset=min(len(data), expected),
        )
    records = np.frombuffer(data, dtype="<f4", offset=header_size).reshape(count, width)
    return _frame_from_records(frame_index, np.array(records), sh_degree)


def save_differential(diff: DifferentialFrame, path) -> None:
    records = _records_from_arrays(
        diff.positions, diff.scales, diff.rotations, diff.opacities, diff.sh
    )
    with open(path, "wb") as fh:
        fh.write(DIFF_MAGIC)
        fh.write(struct.pack("<IIQB", FORMAT_VERSION, diff.frame_index, len(diff), diff.sh_degree))
        for gid, rec in zip(diff.gaussian_ids, records):
            fh.write(struct.pack("<Q", int(gid)))
            fh.write(rec.astype("<f4").tobytes())


def load_differential(path) -> DifferentialFrame:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != DIFF_MAGIC:
        raise ParseError(f"{path}: bad magic {data[:4]!r}", offset=0)
    header_size = 4 + struct.calcsize("<IIQB")
    version, frame_index, count, sh_degree = struct.unpack("<IIQB", data[4:header_size])
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}", offset=4)
    width = _record_width(sh_degree)
    stride = 8 + width * 4
    expected = header_size + count * stride
    if len(data) != expected:
        raise ParseError(
            f"{path}: expected {expected} bytes for {count} updates, got {len(data)}",
            offset=min(len(data), expected),
        )
    ids = np.empty(count, dtype=np.int64)
    records = np.empty((count, width), dtype=np.float32)
    for i in range(count):
        off = header_size + i * stride
        ids[i] = struct.unpack("<Q", data[off:off + 8])[0]
        records[i] = np.frombuffer(data, dtype="<f4", offset=off + 8, count=width)
    nsh = sh_coeff_count(sh_degree)
    return DifferentialFrame(
        frame_index=frame_index,
        gaussian_ids=ids,
        positions=records[:, 0:3],
        scales=records[:, 3:6],
        rotations=records[:, 6:10],
        opacities=records[:, 10],
        sh=records[:, 11:11 + nsh],
        sh_degree=sh_degree,
    )


def save_text_frame(frame: GaussianFrame, path) -> None:
    records = _records_from_arrays(
        frame.positions, frame.scales, frame.rotations, frame.opacities, frame.sh
    )
    with open(path, "w") as fh:
        fh.write(f"{TEXT_HEADER} {FORMAT_VERSION} {len(frame)} {frame.sh_degree}\n")
        for rec in records:
            fh.write(" ".join(repr(float(v)) for v in rec))
            fh.write("\n")


def _load_text_frame(data: bytes, frame_index: int) -> GaussianFrame:
    lines = data.decode().splitlines()
    head = lines[0].split()
    if len(head) != 4 or head[0] != TEXT_HEADER:
        raise ParseError(f"bad text header {lines[0]!r}", offset=0)
    count, sh_degree = int(head[2]), int(head[3])
    width = _record_width(sh_degree)
    if len(lines) - 1 < count:
        raise ParseError(f"expected {count} records, file has {len(lines) - 1}")
    records = np.empty((count, width), dtype=np.float32)
    for i in range(count):
        vals = lines[1 + i].split()
        if len(vals) != width:
            raise ValidationError(
                f"gaussian_id {i}: expected {width} attributes, got {len(vals)}"
            )
        records[i] = [float(v) for v in vals]
    return _frame_from_records(frame_index, records, sh_degree)
