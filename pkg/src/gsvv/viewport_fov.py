"""Viewport traces, autoregressive viewport prediction, approximate
ground-truth FoV scaling and the LSTM-based adaptive FoV predictor.

The FoV model predicts a scaling pair s = (sx, sy) so the reference
frustum (1+s) * F0 covers the actual client view despite viewport
prediction error.  The cheap ground-truth approximation projects only
the four corner pixels of the actual view at a fixed depth into the
predicted camera and takes the smallest centered FoV covering them.

Prediction lead convention: a horizon of n means the newest actual
viewport available when producing frame i is frame i - (n - 1), so
horizon 1 with per-frame refreshes degenerates to a teacher-forced pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import GsvvError, ParseError, ValidationError
from .renderer import Camera, unproject_pixels

CHECKPOINT_MAGIC = b"GSFV"
CHECKPOINT_VERSION = 1

INPUT_DIM = 16  # q(4), dq(4), p(3), dp(3), previous scale (2)
DEFAULT_HIDDEN = 32
DEFAULT_FIXED_DEPTH = 10.0
SCALE_FLOOR = 0.5   # lower bound on 1 + s
SCALE_CAP = 1.0     # upper bound on s


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------

@dataclass
class ViewportSample:
    frame_index: int
    position: np.ndarray    # (3,)
    rotation: np.ndarray    # (4,) unit quaternion, camera-to-world, w first
    timestamp: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-6:
            raise ValidationError(
                f"frame {self.frame_index}: quaternion norm {norm:.8f} != 1"
            )
        self.rotation = q / norm

    def camera(self, fov_x: float, fov_y: float, width: int, height: int) -> Camera:
        return Camera.from_pose(self.position, self.rotation,
                                fov_x, fov_y, width, height)


def validate_trace(trace: list[ViewportSample]) -> None:
    for a, b in zip(trace, trace[1:]):
        if b.timestamp <= a.timestamp:
            raise ValidationError(
                f"timestamps not strictly increasing at frame {b.frame_index}"
            )


def save_trace(trace: list[ViewportSample], path) -> None:
    with open(path, "w") as fh:
        fh.write("frame,timestamp,px,py,pz,qw,qx,qy,qz\n")
        for s in trace:
            vals = [s.timestamp, *s.position, *s.rotation]
            fh.write(str(s.frame_index) + ","
                     + ",".join(repr(float(v)) for v in vals) + "\n")


def load_trace(path) -> list[ViewportSample]:
    trace = []
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("frame,timestamp"):
            raise ParseError(f"{path}: unexpected trace header {header!r}")
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 9:
                raise ParseError(f"{path}:{line_no}: expected 9 columns")
            q = np.array([float(v) for v in parts[5:9]])
            q /= np.linalg.norm(q)
            trace.append(ViewportSample(
                frame_index=int(parts[0]),
                timestamp=float(parts[1]),
                position=np.array([float(v) for v in parts[2:5]]),
                rotation=q,
            ))
    validate_trace(trace)
    return trace


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_pow(q: np.ndarray, exponent: float) -> np.ndarray:
    """Fractional power through axis-angle; q must be unit length."""
    q = np.asarray(q, dtype=np.float64)
    if q[0] < 0:
        q = -q
    half = np.arccos(np.clip(q[0], -1.0, 1.0))
    sin_half = np.sin(half)
    if sin_half < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = q[1:] / sin_half
    new_half = half * exponent
    return np.concatenate([[np.cos(new_half)], axis * np.sin(new_half)])


def slerp(q0: np.ndarray, q1: np.ndarray, t: float) -> np.ndarray:
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    if np.dot(q0, q1) < 0:
        q1 = -q1
    rel = quat_mul(quat_conj(q0), q1)
    rel /= np.linalg.norm(rel)
    out = quat_mul(q0, quat_pow(rel, t))
    return out / np.linalg.norm(out)


# ---------------------------------------------------------------------------
# autoregressive viewport prediction
# ---------------------------------------------------------------------------

def predict_viewport(history: list[ViewportSample], horizon: int):
    """Constant-velocity position extrapolation with slerp-extrapolated
    rotation (order 2).  Returns (samples, fallback_flag); with fewer
    than two history samples the last pose is held and the flag set.
    """
    if not history:
        raise GsvvError("predict_viewport: empty history")
    last = history[-1]
    if len(history) < 2:
        samples = [
            ViewportSample(
                frame_index=last.frame_index + j,
                position=last.position.copy(),
                rotation=last.rotation.copy(),
                timestamp=last.timestamp + j * (1.0 / 30.0),
            )
            for j in range(1, horizon + 1)
        ]
        return samples, True
    prev = history[-2]
    dt = last.timestamp - prev.timestamp
    velocity = last.position - prev.position
    samples = []
    for j in range(1, horizon + 1):
        rot = slerp(prev.rotation, last.rotation, 1.0 + j)
        samples.append(ViewportSample(
            frame_index=last.frame_index + j,
            position=last.position + j * velocity,
            rotation=rot / np.linalg.norm(rot),
            timestamp=last.timestamp + j * dt,
        ))
    return samples, False


def viewport_for_frame(trace: list[ViewportSample], frame: int, lead: int):
    """Viewport the server uses for ``frame`` given actuals up to
    frame - lead; lead 0 returns the actual sample."""
    if lead <= 0:
        return trace[frame], False
    known = trace[:max(frame - lead + 1, 1)]
    preds, fallback = predict_viewport(known, lead)
    return preds[-1], fallback


# ---------------------------------------------------------------------------
# approximate ground-truth FoV scale
# ---------------------------------------------------------------------------

@dataclass
class FovScale:
    sx: float
    sy: float
    capped: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([self.sx, self.sy], dtype=np.float64)

    def apply(self, fov_x: float, fov_y: float) -> tuple[float, float]:
        return (1.0 + self.sx) * fov_x, (1.0 + self.sy) * fov_y


def clamp_scale(s: float, base_fov: float) -> float:
    s = min(s, SCALE_CAP)
    s = max(s, SCALE_FLOOR - 1.0)
    # keep the scaled frustum under pi
    limit = (np.pi * 0.999) / base_fov - 1.0
    return min(s, limit)


def approx_ground_truth_fov(pred_cam: Camera, actual_cam: Camera,
                            fixed_depth: float = DEFAULT_FIXED_DEPTH) -> FovScale:
    """Smallest centered FoV the predicted (reference) camera needs so it
    covers the actual view's four corner pixels at the fixed depth,
    expressed as a scale relative to the actual camera's base FoV."""
    if fixed_depth <= 0:
        raise ValidationError("fixed_depth must be positive")
    w, h = actual_cam.width, actual_cam.height
    corners_u = np.array([0.0, w - 1.0, 0.0, w - 1.0])
    corners_v = np.array([0.0, 0.0, h - 1.0, h - 1.0])
    world = unproject_pixels(actual_cam, corners_u, corners_v,
                             np.full(4, float(fixed_depth)))
    cam_pts = world @ pred_cam.R.T + pred_cam.t
    f0x, f0y = actual_cam.fov_x, actual_cam.fov_y
    if (cam_pts[:, 2] <= 0).any():
        return FovScale(sx=clamp_scale(SCALE_CAP, f0x),
                        sy=clamp_scale(SCALE_CAP, f0y), capped=True)
    half_x = np.max(np.abs(np.arctan2(cam_pts[:, 0], cam_pts[:, 2])))
    half_y = np.max(np.abs(np.arctan2(cam_pts[:, 1], cam_pts[:, 2])))
    sx = 2.0 * half_x / f0x - 1.0
    sy = 2.0 * half_y / f0y - 1.0
    capped = sx > SCALE_CAP or sy > SCALE_CAP
    return FovScale(sx=clamp_scale(sx, f0x), sy=clamp_scale(sy, f0y),
                    capped=capped)


# ---------------------------------------------------------------------------
# LSTM FoV model
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class FovLstm:
    """Single LSTM cell plus a linear head, gate order (i, f, g, o)."""

    hidden: int = DEFAULT_HIDDEN
    input_dim: int = INPUT_DIM
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            self.params = self.init_params(seed=0)

    def init_params(self, seed: int) -> dict:
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(self.hidden)
        def u(*shape):
            return rng.uniform(-bound, bound, size=shape)
        return {
            "w_ih": u(4 * self.hidden, self.input_dim),
            "w_hh": u(4 * self.hidden, self.hidden),
            "b": u(4 * self.hidden),
            "w_out": u(2, self.hidden),
            "b_out": u(2),
        }

    def zero_state(self):
        return np.zeros(self.hidden), np.zeros(self.hidden)

    def step(self, x: np.ndarray, h: np.ndarray, c: np.ndarray):
        """One cell step; returns (s_hat, h, c, cache-for-backprop)."""
        p = self.params
        nh = self.hidden
        z = p["w_ih"] @ x + p["w_hh"] @ h + p["b"]
        gi = _sigmoid(z[:nh])
        gf = _sigmoid(z[nh:2 * nh])
        gg = np.tanh(z[2 * nh:3 * nh])
        go = _sigmoid(z[3 * nh:])
        c_new = gf * c + gi * gg
        tc = np.tanh(c_new)
        h_new = go * tc
        s_hat = p["w_out"] @ h_new + p["b_out"]
        cache = (x, h, c, gi, gf, gg, go, c_new, tc, h_new)
        return s_hat, h_new, c_new, cache

    def forward_sequence(self, inputs: np.ndarray):
        """Teacher-forced forward pass over (T, input_dim) inputs."""
        h, c = self.zero_state()
        outputs = np.zeros((len(inputs), 2))
        caches = []
        for t, x in enumerate(inputs):
            s_hat, h, c, cache = self.step(x, h, c)
            outputs[t] = s_hat
            caches.append(cache)
        return outputs, caches

    def copy(self) -> "FovLstm":
        return FovLstm(hidden=self.hidden, input_dim=self.input_dim,
                       params={k: v.copy() for k, v in self.params.items()})


def fov_loss(outputs: np.ndarray, targets: np.ndarray) -> float:
    """Mean absolute error over all frames and both scale components."""
    return float(np.mean(np.abs(outputs - targets)))


def loss_and_grads(model: FovLstm, inputs: np.ndarray, targets: np.ndarray):
    """L1 loss and analytic gradients via backprop through time."""
    p = model.params
    nh = model.hidden
    outputs, caches = model.forward_sequence(inputs)
    residual = outputs - targets
    loss = float(np.mean(np.abs(residual)))
    d_out = np.sign(residual) / residual.size

    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dh_next = np.zeros(nh)
    dc_next = np.zeros(nh)
    for t in range(len(inputs) - 1, -1, -1):
        x, h_prev, c_prev, gi, gf, gg, go, c_new, tc, h_new = caches[t]
        ds = d_out[t]
        grads["w_out"] += np.outer(ds, h_new)
        grads["b_out"] += ds
        dh = p["w_out"].T @ ds + dh_next
        dc = dh * go * (1.0 - tc * tc) + dc_next
        do = dh * tc
        df = dc * c_prev
        di = dc * gg
        dg = dc * gi
        dc_next = dc * gf
        dz = np.concatenate([
            di * gi * (1.0 - gi),
            df * gf * (1.0 - gf),
            dg * (1.0 - gg * gg),
            do * go * (1.0 - go),
        ])
        grads["w_ih"] += np.outer(dz, x)
        grads["w_hh"] += np.outer(dz, h_prev)
        grads["b"] += dz
        dh_next = p["w_hh"].T @ dz
    return loss, grads


def clip_gradients(grads: dict, max_norm: float = 1.0) -> dict:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        return {k: g * scale for k, g in grads.items()}
    return grads


# ---------------------------------------------------------------------------
# training data and training loop
# ---------------------------------------------------------------------------

@dataclass
class FovGeometry:
    """Client camera geometry shared by training and rollout."""

    fov_x: float = 1.48
    fov_y: float = 1.20
    width: int = 160
    height: int = 120
    fixed_depth: float = DEFAULT_FIXED_DEPTH

    def camera(self, sample: ViewportSample) -> Camera:
        return sample.camera(self.fov_x, self.fov_y, self.width, self.height)


def oracle_scales(trace: list[ViewportSample], horizon: int,
                  geometry: FovGeometry) -> np.ndarray:
    """Approximate ground-truth scale per frame: predict the viewport the
    server would use, then fit the covering FoV against the actual one."""
    lead = horizon - 1
    scales = np.zeros((len(trace), 2))
    for t in range(len(trace)):
        pred_sample, _ = viewport_for_frame(trace, t, lead)
        s = approx_ground_truth_fov(
            geometry.camera(pred_sample), geometry.camera(trace[t]),
            geometry.fixed_depth,
        )
        scales[t] = (s.sx, s.sy)
    return scales


def teacher_inputs(trace: list[ViewportSample], scales: np.ndarray) -> np.ndarray:
    """Inputs [q, dq, p, dp, s_prev] with actual viewports and the
    approximate ground-truth scale of the previous frame."""
    t_len = len(trace)
    inputs = np.zeros((t_len, INPUT_DIM))
    for t in range(t_len):
        q = trace[t].rotation
        p = trace[t].position
        dq = q - trace[t - 1].rotation if t > 0 else np.zeros(4)
        dp = p - trace[t - 1].position if t > 0 else np.zeros(3)
        s_prev = scales[t - 1] if t > 0 else np.zeros(2)
        inputs[t] = np.concatenate([q, dq, p, dp, s_prev])
    return inputs


def train_fov(model: FovLstm, traces: list[list[ViewportSample]],
              epochs: int = 50, lr: float = 1e-2, horizon: int = 6,
              geometry: FovGeometry | None = None, clip: float = 1.0):
    """Plain SGD on the L1 loss with teacher forcing.

    Returns (model, per-epoch mean loss list); the model is updated in
    place, zero epochs leave it untouched.
    """
    geometry = geometry or FovGeometry()
    for trace in traces:
        if len(trace) < 8:
            raise GsvvError(
                f"trace starting at frame {trace[0].frame_index} has "
                f"{len(trace)} samples; need at least 8"
            )
    prepared = []
    for trace in traces:
        scales = oracle_scales(trace, horizon, geometry)
        prepared.append((teacher_inputs(trace, scales), scales))

    losses = []
    for _ in range(epochs):
        epoch_loss = 0.0
        for inputs, targets in prepared:
            loss, grads = loss_and_grads(model, inputs, targets)
            if not np.isfinite(loss):
                raise GsvvError(
                    "training diverged (loss is not finite); lower the learning rate"
                )
            grads = clip_gradients(grads, clip)
            for k in model.params:
                model.params[k] -= lr * grads[k]
            epoch_loss += loss
        losses.append(epoch_loss / len(prepared))
    return model, losses


# ---------------------------------------------------------------------------
# streaming rollout
# ---------------------------------------------------------------------------

def rolling_predict(model: FovLstm, trace: list[ViewportSample], horizon: int,
                    refresh_period: int = 1,
                    geometry: FovGeometry | None = None) -> list[FovScale]:
    """Per-frame FoV scale under streaming conditions.

    Actual viewports arrive with a lead of horizon-1 frames; on every
    refresh the hidden state is rebuilt by teacher-forcing the actual
    history (with oracle previous scales), then the model rolls forward
    on predicted viewports feeding back its own outputs.
    """
    geometry = geometry or FovGeometry()
    lead = horizon - 1
    refresh_period = max(refresh_period, 1)
    oracle = oracle_scales(trace, horizon, geometry)
    teacher = teacher_inputs(trace, oracle)

    # teacher-forced states after each prefix, computed once
    h, c = model.zero_state()
    states = [(h.copy(), c.copy())]
    teacher_outputs = np.zeros((len(trace), 2))
    for t in range(len(trace)):
        s_hat, h, c, _ = model.step(teacher[t], h, c)
        teacher_outputs[t] = s_hat
        states.append((h.copy(), c.copy()))

    results = []
    for t in range(len(trace)):
        known_until = t - lead
        if known_until >= 0:
            refreshed_until = (known_until // refresh_period) * refresh_period
        else:
            refreshed_until = -1
        if refreshed_until >= t:
            s = teacher_outputs[t]
        else:
            h, c = states[refreshed_until + 1]
            h, c = h.copy(), c.copy()
            s = oracle[refreshed_until] if refreshed_until >= 0 else np.zeros(2)
            history = trace[:refreshed_until + 1] if refreshed_until >= 0 else trace[:1]
            preds, _ = predict_viewport(history, t - refreshed_until)
            prev_sample = trace[refreshed_until] if refreshed_until >= 0 else trace[0]
            for j, sample in enumerate(preds):
                q, p = sample.rotation, sample.position
                dq = q - prev_sample.rotation
                dp = p - prev_sample.position
                x = np.concatenate([q, dq, p, dp, s])
                s, h, c, _ = model.step(x, h, c)
                prev_sample = sample
        results.append(FovScale(
            sx=clamp_scale(float(s[0]), geometry.fov_x),
            sy=clamp_scale(float(s[1]), geometry.fov_y),
        ))
    return results


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 version, u32 hidden, u32 input_dim, float32
# parameters flat in order w_ih, w_hh, b, w_out, b_out
# ---------------------------------------------------------------------------

_PARAM_ORDER = ("w_ih", "w_hh", "b", "w_out", "b_out")


def save_model(model: FovLstm, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", CHECKPOINT_VERSION, model.hidden,
                             model.input_dim))
        for name in _PARAM_ORDER:
            fh.write(model.params[name].astype("<f4").tobytes())


def load_model(path) -> FovLstm:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad checkpoint magic {data[:4]!r}", offset=0)
    version, hidden, input_dim = struct.unpack_from("<III", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}", offset=4)
    model = FovLstm(hidden=hidden, input_dim=input_dim)
    off = 16
    shapes = {
        "w_ih": (4 * hidden, input_dim),
        "w_hh": (4 * hidden, hidden),
        "b": (4 * hidden,),
        "w_out": (2, hidden),
        "b_out": (2,),
    }
    for name in _PARAM_ORDER:
        count = int(np.prod(shapes[name]))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off)
        model.params[name] = arr.reshape(shapes[name]).astype(np.float64)
        off += 4 * count
    expected = off
    if len(data) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, got {len(data)}")
    return model
