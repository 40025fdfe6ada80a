"""Deterministic CPU splat rasterizer and the camera model shared by the
alignment, viewport and simulation modules.

Camera convention: X_cam = R @ X_world + t with a pinhole intrinsic K;
u = fx * x/z + cx.  Rendering is EWA-style splatting: project means,
Sigma' = J R Sigma R^T J^T for the 2D footprint, front-to-back alpha
compositing over Gaussians sorted by camera depth.  The depth map is the
alpha-weighted expected camera z; a Gaussian counts as visible when its
best per-pixel blend weight exceeds a threshold.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import GsvvError, ParseError, ValidationError
from .gaussian_model import GaussianFrame

DEPTH_MAGIC = b"GSDP"

# real spherical harmonics constants, degrees 0..3
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

# EWA low-pass constant added to the 2D covariance diagonal
LOWPASS = 0.3

DEFAULT_VIS_THRESHOLD = 1.0 / 255.0


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (..., 4) quaternions, w first."""
    q = normalize_quaternions(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - z * w)
    rot[..., 0, 2] = 2 * (x * z + y * w)
    rot[..., 1, 0] = 2 * (x * y + z * w)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - x * w)
    rot[..., 2, 0] = 2 * (x * z - y * w)
    rot[..., 2, 1] = 2 * (y * z + x * w)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class Camera:
    K: np.ndarray          # (3, 3) intrinsics, pixels
    R: np.ndarray          # (3, 3) world-to-camera rotation
    t: np.ndarray          # (3,) translation, X_cam = R X + t
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.max(np.abs(self.R @ self.R.T - np.eye(3))) > 1e-5:
            raise ValidationError("camera rotation is not orthonormal")

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    @property
    def fov_x(self) -> float:
        return 2.0 * np.arctan(self.width / (2.0 * self.fx))

    @property
    def fov_y(self) -> float:
        return 2.0 * np.arctan(self.height / (2.0 * self.fy))

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    @classmethod
    def from_fov(cls, fov_x: float, fov_y: float, width: int, height: int,
                 R=None, t=None) -> "Camera":
        if not (0 < fov_x < np.pi and 0 < fov_y < np.pi):
            raise ValidationError(f"FoV ({fov_x}, {fov_y}) outside (0, pi)")
        fx = width / (2.0 * np.tan(fov_x / 2.0))
        fy = height / (2.0 * np.tan(fov_y / 2.0))
        K = np.array([[fx, 0, width / 2.0], [0, fy, height / 2.0], [0, 0, 1.0]])
        return cls(K=K, R=np.eye(3) if R is None else R,
                   t=np.zeros(3) if t is None else t,
                   width=width, height=height)

    @classmethod
    def from_pose(cls, position, quaternion, fov_x, fov_y, width, height) -> "Camera":
        """Camera from a viewport pose: quaternion is camera-to-world."""
        rot_c2w = quat_to_rot(np.asarray(quaternion, dtype=np.float64))
        R = rot_c2w.T
        t = -R @ np.asarray(position, dtype=np.float64)
        return cls.from_fov(fov_x, fov_y, width, height, R=R, t=t)

    def with_fov(self, fov_x: float, fov_y: float) -> "Camera":
        return Camera.from_fov(fov_x, fov_y, self.width, self.height,
                               R=self.R.copy(), t=self.t.copy())

    def with_resolution(self, width: int, height: int) -> "Camera":
        return Camera.from_fov(self.fov_x, self.fov_y, width, height,
                               R=self.R.copy(), t=self.t.copy())

    def to_json(self) -> str:
        return json.dumps({
            "K": self.K.tolist(), "R": self.R.tolist(), "t": self.t.tolist(),
            "width": self.width, "height": self.height,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Camera":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"camera JSON: {exc}") from exc
        if "K" in obj:
            return cls(K=np.array(obj["K"]), R=np.array(obj["R"]),
                       t=np.array(obj["t"]), width=obj["width"], height=obj["height"])
        return cls.from_pose(obj["position"], obj["quaternion"],
                             obj["fov_x"], obj["fov_y"],
                             obj["width"], obj["height"])


def project_points(cam: Camera, points: np.ndarray):
    """World points -> (u, v, z_cam); caller filters z <= 0."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam_pts = pts @ cam.R.T + cam.t
    z = cam_pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * cam_pts[:, 0] / z + cam.cx
        v = cam.fy * cam_pts[:, 1] / z + cam.cy
    return u, v, z


def project_point(cam: Camera, point) -> tuple[float, float, float]:
    u, v, z = project_points(cam, np.asarray(point, dtype=np.float64)[None])
    if z[0] <= 0:
        raise GsvvError(f"point {point} is behind the camera (z={z[0]:.6g})")
    return float(u[0]), float(v[0]), float(z[0])


def unproject_pixels(cam: Camera, u: np.ndarray, v: np.ndarray,
                     depth: np.ndarray) -> np.ndarray:
    """Pixel coordinates plus camera-space depth -> world points."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (u - cam.cx) / cam.fx * depth
    y = (v - cam.cy) / cam.fy * depth
    cam_pts = np.stack([x, y, depth], axis=-1)
    return (cam_pts - cam.t) @ cam.R


def eval_sh(sh: np.ndarray, dirs: np.ndarray, degree: int) -> np.ndarray:
    """View-dependent colors: 0.5 + sum(coeff * basis), clipped to [0, 1].

    sh is (N, 3*(L+1)^2) coefficient-major; dirs are unit view directions.
    """
    n = sh.shape[0]
    coeffs = sh.reshape(n, -1, 3).astype(np.float64)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    basis = [np.full(n, SH_C0)]
    if degree >= 1:
        basis += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        basis += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        basis += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    b = np.stack(basis, axis=1)
    colors = 0.5 + np.einsum("nk,nkc->nc", b, coeffs)
    return np.clip(colors, 0.0, 1.0)


def dc_from_rgb(rgb) -> np.ndarray:
    """DC SH coefficients that render as the given base color."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


@dataclass
class RenderOutput:
    color: np.ndarray        # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray        # (H, W) float32, alpha-weighted camera z
    alpha: np.ndarray        # (H, W) float32 accumulated opacity
    visible_ids: np.ndarray  # gaussian ids with max blend weight > threshold


def render(frame: GaussianFrame, cam: Camera,
           vis_threshold: float = DEFAULT_VIS_THRESHOLD) -> RenderOutput:
    n = len(frame)
    if n == 0:
        raise GsvvError("cannot render an empty frame")
    h, w = cam.height, cam.width

    pos = frame.positions.astype(np.float64)
    cam_pts = pos @ cam.R.T + cam.t
    z = cam_pts[:, 2]
    in_front = z > 1e-6

    color_img = np.zeros((h, w, 3), dtype=np.float64)
    depth_num = np.zeros((h, w), dtype=np.float64)
    depth_den = np.zeros((h, w), dtype=np.float64)
    transmittance = np.ones((h, w), dtype=np.float64)
    max_weight = np.zeros(n, dtype=np.float64)

    if in_front.any():
        idx = np.nonzero(in_front)[0]
        # canonical front-to-back order: depth, then position (permutation
        # of the input leaves the image unchanged)
        order = np.lexsort((
            pos[idx, 1], pos[idx, 0], cam_pts[idx, 2],
        ))
        idx = idx[order]

        u = cam.fx * cam_pts[idx, 0] / z[idx] + cam.cx
        v = cam.fy * cam_pts[idx, 1] / z[idx] + cam.cy

        scales = np.exp(frame.scales[idx].astype(np.float64))
        rots = quat_to_rot(frame.rotations[idx])
        # Sigma_world = R S^2 R^T
        rs = rots * scales[:, None, :]
        cov_world = rs @ np.transpose(rs, (0, 2, 1))
        cov_cam = np.einsum("ij,njk,lk->nil", cam.R, cov_world, cam.R)

        zi = z[idx]
        fx, fy = cam.fx, cam.fy
        # clamp the projection tangents so nearly edge-on splats do not
        # smear a linearized footprint across the whole screen
        lim_x = 1.3 * w / (2.0 * fx)
        lim_y = 1.3 * h / (2.0 * fy)
        tx = np.clip(cam_pts[idx, 0] / zi, -lim_x, lim_x)
        ty = np.clip(cam_pts[idx, 1] / zi, -lim_y, lim_y)
        jac = np.zeros((len(idx), 2, 3), dtype=np.float64)
        jac[:, 0, 0] = fx / zi
        jac[:, 0, 2] = -fx * tx / zi
        jac[:, 1, 1] = fy / zi
        jac[:, 1, 2] = -fy * ty / zi
        cov2d = jac @ cov_cam @ np.transpose(jac, (0, 2, 1))
        cov2d[:, 0, 0] += LOWPASS
        cov2d[:, 1, 1] += LOWPASS

        dirs = pos[idx] - cam.center
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        colors = eval_sh(frame.sh[idx], dirs, frame.sh_degree)
        opacities = sigmoid(frame.opacities[idx].astype(np.float64))

        det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
        rx = 3.0 * np.sqrt(np.maximum(cov2d[:, 0, 0], 0.0))
        ry = 3.0 * np.sqrt(np.maximum(cov2d[:, 1, 1], 0.0))

        for g in range(len(idx)):
            if det[g] <= 0:
                continue
            x0 = max(int(np.floor(u[g] - rx[g])), 0)
            x1 = min(int(np.ceil(u[g] + rx[g])), w - 1)
            y0 = max(int(np.floor(v[g] - ry[g])), 0)
            y1 = min(int(np.ceil(v[g] + ry[g])), h - 1)
            if x0 > x1 or y0 > y1:
                continue
            ia = cov2d[g, 1, 1] / det[g]
            ib = -cov2d[g, 0, 1] / det[g]
            ic = cov2d[g, 0, 0] / det[g]
            dx = np.arange(x0, x1 + 1, dtype=np.float64) - u[g]
            dy = np.arange(y0, y1 + 1, dtype=np.float64) - v[g]
            maha = (
                ia * dx[None, :] ** 2
                + 2.0 * ib * dy[:, None] * dx[None, :]
                + ic * dy[:, None] ** 2
            )
            alpha = opacities[g] * np.exp(-0.5 * maha)
            alpha[alpha < 1.0 / 255.0] = 0.0
            if not alpha.any():
                continue
            t_patch = transmittance[y0:y1 + 1, x0:x1 + 1]
            weight = t_patch * alpha
            color_img[y0:y1 + 1, x0:x1 + 1] += weight[:, :, None] * colors[g]
            depth_num[y0:y1 + 1, x0:x1 + 1] += weight * zi[g]
            depth_den[y0:y1 + 1, x0:x1 + 1] += weight
            t_patch *= 1.0 - alpha
            max_weight[idx[g]] = weight.max()

    depth = np.where(depth_den > 0, depth_num / np.maximum(depth_den, 1e-300), 0.0)
    visible = np.nonzero(max_weight > vis_threshold)[0]
    return RenderOutput(
        color=np.clip(color_img, 0.0, 1.0).astype(np.float32),
        depth=depth.astype(np.float32),
        alpha=(1.0 - transmittance).astype(np.float32),
        visible_ids=visible.astype(np.int64),
    )


# ---------------------------------------------------------------------------
# image and depth raster I/O
# ---------------------------------------------------------------------------

def save_png(image: np.ndarray, path) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    if data.ndim == 2:
        Image.fromarray(data, mode="L").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float32)
    return data / 255.0


def save_ppm(image: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def save_depth(depth: np.ndarray, path) -> None:
    """Raw float32 raster: magic, u32 width, u32 height, row-major data."""
    depth = np.asarray(depth, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<II", depth.shape[1], depth.shape[0]))
        fh.write(depth.tobytes())


def load_depth(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != DEPTH_MAGIC:
        raise ParseError(f"{path}: bad depth magic {data[:4]!r}", offset=0)
    w, h = struct.unpack_from("<II", data, 4)
    expected = 12 + 4 * w * h
    if len(data) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, got {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w).copy()
