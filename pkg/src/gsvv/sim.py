"""Trace-driven streaming simulator and synthetic scene generation.

Per frame the server predicts the client viewport, picks an adaptive
reference FoV, renders a low-resolution reference from the full-LoD
decode of the compressed sequence, and selects tiles/LoDs under the
frame's byte budget.  The client accumulates received payloads, renders
color+depth at the actual viewport, aligns the reference with PRPA,
restores colors, and every frame is scored against an uncompressed
render at the same viewport.  Transport is abstract byte accounting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adaptation import BandwidthTrace, SelectionPlan, TilePlanner, frame_budget
from .errors import GsvvError, ParseError, ValidationError
from .gaussian_model import (
    GaussianFrame,
    apply_differential,
    diff_frames,
    sh_coeff_count,
)
from .metrics import QualityReport, psnr, ssim
from .prpa import AlignmentInputs, align
from .renderer import Camera, dc_from_rgb, render, save_png
from .restore import RestoreInputs, restore
from .svq import (
    SvqCodebook,
    decode,
    QuantizedAttribute,
    default_attribute_specs,
    extract_attribute,
    build_codebook,
    quantize_frame,
    save_codebooks,
)
from .tiling import (
    DeflateBackend,
    LodSchedule,
    TiledLodContainer,
    assemble_container,
    default_schedule,
    make_tiles,
    morton_sort,
)
from .viewport_fov import (
    FovGeometry,
    FovLstm,
    FovScale,
    ViewportSample,
    rolling_predict,
    viewport_for_frame,
)

# scaled-down per-attribute bit allocation for desk-sized scenes
DESK_INIT_BITS = {
    "scale": 7,
    "rot_real": 5,
    "rot_imag": 7,
    "opacity": 5,
    "sh_level_0": 5,
    "sh_level_1": 5,
    "sh_level_2": 4,
    "sh_level_3": 4,
}

PALETTE = np.array([
    [0.85, 0.25, 0.20], [0.20, 0.65, 0.30], [0.25, 0.35, 0.85],
    [0.90, 0.80, 0.25], [0.60, 0.30, 0.75], [0.20, 0.75, 0.75],
    [0.95, 0.55, 0.20], [0.55, 0.55, 0.55],
])


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneSpec:
    n_gaussians: int = 1500
    n_frames: int = 30
    seed: int = 0
    n_blobs: int = 8
    blob_sigma: float = 0.25
    extent: tuple = ((-2.0, -1.5, 3.5), (2.0, 1.5, 6.5))
    motion_fraction: float = 0.15
    motion: str = "oscillate"   # bounded motion; "drift" for linear velocity
    velocity_sigma: float = 0.01
    oscillate_amp: tuple = (0.08, 0.25)
    oscillate_hz: tuple = (0.3, 0.8)
    sh_degree: int = 3
    scale_range: tuple = (0.05, 0.14)
    opacity_range: tuple = (1.5, 5.0)
    sh_noise: float = 0.05
    # cylindrical backdrop band so renders fill the frame like real captures
    backdrop: bool = True
    backdrop_radius: float = 7.0
    backdrop_sigma: float = 0.40
    backdrop_spacing: float = 0.65
    backdrop_azimuth: float = 1.9
    backdrop_height: float = 6.5


def _backdrop_gaussians(spec: SceneSpec, rng: np.random.Generator):
    arc = 2 * spec.backdrop_azimuth * spec.backdrop_radius
    n_theta = max(int(np.ceil(arc / spec.backdrop_spacing)), 2)
    n_y = max(int(np.ceil(2 * spec.backdrop_height / spec.backdrop_spacing)), 2)
    thetas = np.linspace(-spec.backdrop_azimuth, spec.backdrop_azimuth, n_theta)
    ys = np.linspace(-spec.backdrop_height, spec.backdrop_height, n_y)
    gt, gy = np.meshgrid(thetas, ys)
    gt = gt.ravel()
    gy = gy.ravel()
    n = len(gt)
    positions = np.stack([
        spec.backdrop_radius * np.sin(gt),
        gy,
        spec.backdrop_radius * np.cos(gt),
    ], axis=1)
    scales = np.log(np.full((n, 3), spec.backdrop_sigma))
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    opacities = np.full(n, 6.0)
    # smooth color field over the band, distinct per channel
    phase = rng.uniform(0, 2 * np.pi, size=3)
    colors = np.stack([
        0.45 + 0.25 * np.sin(2.1 * gt + 0.8 * gy + phase[0]),
        0.45 + 0.25 * np.sin(1.3 * gt - 1.1 * gy + phase[1]),
        0.45 + 0.25 * np.sin(3.0 * gt + 0.4 * gy + phase[2]),
    ], axis=1)
    nsh = sh_coeff_count(spec.sh_degree)
    sh = rng.normal(0, spec.sh_noise * 0.5, size=(n, nsh))
    sh[:, 0:3] = dc_from_rgb(np.clip(colors, 0.05, 0.95))
    return positions, scales, quats, opacities, sh


def _keyframe_from_spec(spec: SceneSpec) -> GaussianFrame:
    rng = np.random.default_rng(spec.seed)
    lo = np.array(spec.extent[0])
    hi = np.array(spec.extent[1])
    centers = rng.uniform(lo + spec.blob_sigma, hi - spec.blob_sigma,
                          size=(spec.n_blobs, 3))
    blob = rng.integers(spec.n_blobs, size=spec.n_gaussians)
    positions = centers[blob] + rng.normal(0, spec.blob_sigma,
                                           size=(spec.n_gaussians, 3))
    positions = np.clip(positions, lo, hi)

    scales = np.log(rng.uniform(*spec.scale_range, size=(spec.n_gaussians, 3)))
    quats = rng.normal(size=(spec.n_gaussians, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opacities = rng.uniform(*spec.opacity_range, size=spec.n_gaussians)

    nsh = sh_coeff_count(spec.sh_degree)
    sh = rng.normal(0, spec.sh_noise, size=(spec.n_gaussians, nsh))
    colors = PALETTE[blob % len(PALETTE)]
    colors = np.clip(colors + rng.normal(0, 0.10, size=colors.shape), 0.05, 0.95)
    sh[:, 0:3] = dc_from_rgb(colors)

    if spec.backdrop:
        bp, bs, bq, bo, bsh = _backdrop_gaussians(spec, rng)
        positions = np.vstack([positions, bp])
        scales = np.vstack([scales, bs])
        quats = np.vstack([quats, bq])
        opacities = np.concatenate([opacities, bo])
        sh = np.vstack([sh, bsh])

    return GaussianFrame(
        frame_index=0,
        positions=positions, scales=scales, rotations=quats,
        opacities=opacities, sh=sh, sh_degree=spec.sh_degree,
    )


def generate_scene(spec: SceneSpec):
    """Seeded keyframe plus exact differential frames.

    Movers either oscillate around their rest position (scene stays
    statistically stationary, like captured subjects) or drift linearly.
    Returns [GaussianFrame, DifferentialFrame, ...].
    """
    if spec.n_gaussians < 1:
        raise ValidationError("scene needs at least one Gaussian")
    if spec.motion not in ("oscillate", "drift"):
        raise ValidationError(f"unknown motion model {spec.motion!r}")
    key = _keyframe_from_spec(spec)
    rng = np.random.default_rng(spec.seed + 1)
    n_move = int(round(spec.motion_fraction * spec.n_gaussians))
    movers = rng.choice(spec.n_gaussians, size=n_move, replace=False)
    base = key.positions[movers].astype(np.float64)
    if spec.motion == "drift":
        velocity = rng.normal(0, spec.velocity_sigma, size=(n_move, 3))
    else:
        amp = rng.uniform(*spec.oscillate_amp, size=(n_move, 1))
        hz = rng.uniform(*spec.oscillate_hz, size=n_move)
        phase = rng.uniform(0, 2 * np.pi, size=n_move)
        direction = rng.normal(size=(n_move, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)

    frames: list = [key]
    prev = key
    for f in range(1, spec.n_frames):
        nxt = prev.copy(frame_index=f)
        if spec.motion == "drift":
            nxt.positions[movers] = (
                base + f * velocity).astype(np.float32)
        else:
            t = f / 30.0
            offset = amp * np.sin(2 * np.pi * hz * t + phase)[:, None] * direction
            nxt.positions[movers] = (base + offset).astype(np.float32)
        frames.append(diff_frames(prev, nxt, epsilon=0.0))
        prev = nxt
    return frames


def reconstruct_frames(frames) -> list[GaussianFrame]:
    """Expand [keyframe, diff, diff, ...] into full frames."""
    if not frames or not isinstance(frames[0], GaussianFrame):
        raise ValidationError("sequence must start with a keyframe")
    out = [frames[0]]
    for diff in frames[1:]:
        out.append(apply_differential(out[-1], diff))
    return out


def make_plane_frame(z: float, x_range, y_range, n_side: int = 24,
                     color=(0.6, 0.6, 0.6), opacity: float = 8.0,
                     sigma: float | None = None, sh_degree: int = 1,
                     frame_index: int = 0) -> GaussianFrame:
    """Fronto-parallel sheet of opaque Gaussians at depth ``z`` (a depth
    and occlusion test fixture)."""
    xs = np.linspace(*x_range, n_side)
    ys = np.linspace(*y_range, n_side)
    gx, gy = np.meshgrid(xs, ys)
    n = n_side * n_side
    positions = np.stack([gx.ravel(), gy.ravel(), np.full(n, float(z))], axis=1)
    if sigma is None:
        sigma = 1.2 * (xs[1] - xs[0]) if n_side > 1 else 0.1
    scales = np.log(np.full((n, 3), sigma))
    scales[:, 2] = np.log(1e-3)  # flat disk
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    sh = np.zeros((n, sh_coeff_count(sh_degree)))
    sh[:, 0:3] = dc_from_rgb(color)
    return GaussianFrame(
        frame_index=frame_index, positions=positions, scales=scales,
        rotations=rotations, opacities=np.full(n, opacity), sh=sh,
        sh_degree=sh_degree,
    )


def merge_gaussian_frames(a: GaussianFrame, b: GaussianFrame) -> GaussianFrame:
    if a.sh_degree != b.sh_degree:
        raise ValidationError("cannot merge frames with different SH degrees")
    return GaussianFrame(
        frame_index=a.frame_index,
        positions=np.vstack([a.positions, b.positions]),
        scales=np.vstack([a.scales, b.scales]),
        rotations=np.vstack([a.rotations, b.rotations]),
        opacities=np.concatenate([a.opacities, b.opacities]),
        sh=np.vstack([a.sh, b.sh]),
        sh_degree=a.sh_degree,
    )


def yaw_quaternion(yaw: float, pitch: float = 0.0) -> np.ndarray:
    """Camera-to-world quaternion: yaw about world y, then pitch about x."""
    from .viewport_fov import quat_mul

    qy = np.array([np.cos(yaw / 2), 0.0, np.sin(yaw / 2), 0.0])
    qp = np.array([np.cos(pitch / 2), np.sin(pitch / 2), 0.0, 0.0])
    q = quat_mul(qy, qp)
    return q / np.linalg.norm(q)


def generate_trace(kind: str, n_frames: int, seed: int = 0,
                   fps: float = 30.0) -> list[ViewportSample]:
    """Synthetic head-motion traces: static, smooth pan, or fast_turn."""
    rng = np.random.default_rng(seed)
    samples = []
    phase = rng.uniform(0, 2 * np.pi)
    for i in range(n_frames):
        t = i / fps
        if kind == "static":
            yaw, pitch, pos = 0.0, 0.0, np.zeros(3)
        elif kind == "smooth":
            yaw = 0.12 * np.sin(2 * np.pi * 0.20 * t + phase)
            pitch = 0.05 * np.sin(2 * np.pi * 0.13 * t)
            pos = np.array([0.25 * np.sin(2 * np.pi * 0.11 * t), 0.0, 0.0])
        elif kind == "fast_turn":
            yaw = 0.70 * np.sin(2 * np.pi * 1.0 * t + phase)
            pitch = 0.12 * np.sin(2 * np.pi * 0.6 * t)
            pos = np.array([0.3 * np.sin(2 * np.pi * 0.4 * t), 0.0, 0.0])
        else:
            raise ValidationError(f"unknown trace kind {kind!r}")
        samples.append(ViewportSample(
            frame_index=i, timestamp=t, position=pos,
            rotation=yaw_quaternion(yaw, pitch),
        ))
    return samples


def scene_diameter(frame: GaussianFrame) -> float:
    span = frame.positions.max(axis=0) - frame.positions.min(axis=0)
    return float(np.linalg.norm(span))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class SimConfig:
    width: int = 160
    height: int = 120
    fov_x: float = 1.48
    fov_y: float = 1.20
    reference_divisor: int = 4
    buffer_frames: int = 6
    fps: float = 30.0
    refresh_period: int = 1
    seed: int = 0
    tile_size_key: int = 8000
    tile_size_diff: int = 4000
    grid_bits: int = 10
    top_bits: int = 4
    bits_preset: str = "desk"          # "desk" or "paper"
    sample_size: int = 4096
    vis_threshold: float = 1.0 / 255.0
    kernel: int = 2
    depth_threshold_frac: float = 0.05  # of the scene diameter
    restore_window: int = 8
    reference_overhead: float = 0.1     # fraction of raw reference bytes charged
    enable_prpa: bool = True
    adaptive_fov: bool = True
    fixed_fov_scale: float = 0.10
    fixed_depth: float = 10.0
    save_images: str = ""               # directory for per-frame PNGs

    @property
    def ref_width(self) -> int:
        return max(self.width // self.reference_divisor, 8)

    @property
    def ref_height(self) -> int:
        return max(self.height // self.reference_divisor, 8)

    def init_bits(self) -> dict:
        if self.bits_preset == "paper":
            return {}
        if self.bits_preset == "desk":
            return dict(DESK_INIT_BITS)
        raise ValidationError(f"unknown bits preset {self.bits_preset!r}")

    def geometry(self) -> FovGeometry:
        return FovGeometry(fov_x=self.fov_x, fov_y=self.fov_y,
                           width=self.width, height=self.height,
                           fixed_depth=self.fixed_depth)


_CONFIG_TYPES = {f.name: f.type for f in SimConfig.__dataclass_fields__.values()}


def parse_config_file(path) -> SimConfig:
    """'key = value' per line, '#' comments; keys mirror SimConfig."""
    values = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{line_no}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in _CONFIG_TYPES:
                raise ParseError(f"{path}:{line_no}: unknown config key {key!r}")
            kind = _CONFIG_TYPES[key]
            if kind == "int":
                values[key] = int(val)
            elif kind == "float":
                values[key] = float(val)
            elif kind == "bool":
                if val.lower() not in ("true", "false"):
                    raise ParseError(f"{path}:{line_no}: boolean must be true/false")
                values[key] = val.lower() == "true"
            else:
                values[key] = val
    return SimConfig(**values)


# ---------------------------------------------------------------------------
# video encoding
# ---------------------------------------------------------------------------

@dataclass
class EncodedVideo:
    codebooks: dict[str, SvqCodebook]
    schedule: LodSchedule
    containers: list[TiledLodContainer]
    bootstrap_bytes: int
    n_gaussians: int


def _decode_full(codebooks, frame: GaussianFrame, quantized) -> GaussianFrame:
    from .svq import set_attribute

    out = frame.copy()
    for name, cb in codebooks.items():
        values = decode(quantized[name], cb, cb.spec.n_layers)
        set_attribute(out, name, values)
    return out


def encode_video(frames, config: SimConfig,
                 schedule: LodSchedule | None = None) -> EncodedVideo:
    """Build per-video codebooks from the keyframe, quantize and
    containerize every frame, and precompute the server-side full-LoD
    decodes used for reference rendering."""
    key = frames[0]
    if not isinstance(key, GaussianFrame):
        raise ValidationError("sequence must start with a keyframe")
    specs = default_attribute_specs(
        sh_degree=key.sh_degree, top_bits=config.top_bits,
        init_bits=config.init_bits(),
    )
    codebooks = {}
    for name, spec in specs.items():
        vectors = extract_attribute(key, name)
        _tree, cb = build_codebook(vectors, spec,
                                   sample_size=config.sample_size,
                                   seed=config.seed)
        codebooks[name] = cb
    schedule = schedule or default_schedule(specs)
    backend = DeflateBackend()

    containers = []

    q_key = quantize_frame(key, codebooks)
    perm = morton_sort(key, config.grid_bits)
    tiles = make_tiles(key, perm, config.tile_size_key)
    containers.append(assemble_container(
        key, tiles, q_key, schedule, backend, codebook_ref="video"
    ))

    for diff in frames[1:]:
        temp = GaussianFrame(
            frame_index=diff.frame_index,
            positions=diff.positions, scales=diff.scales,
            rotations=diff.rotations, opacities=diff.opacities,
            sh=diff.sh, sh_degree=diff.sh_degree,
        )
        q_diff = quantize_frame(temp, codebooks)
        perm = morton_sort(temp, config.grid_bits)
        tiles = make_tiles(temp, perm, config.tile_size_diff)
        containers.append(assemble_container(
            temp, tiles, q_diff, schedule, backend, codebook_ref="video",
            global_ids=diff.gaussian_ids, total_gaussians=len(key),
        ))

    import tempfile
    import os

    fd, tmp = tempfile.mkstemp(suffix=".gscs")
    os.close(fd)
    try:
        save_codebooks(codebooks, tmp)
        bootstrap = os.path.getsize(tmp)
    finally:
        os.unlink(tmp)
    return EncodedVideo(
        codebooks=codebooks, schedule=schedule, containers=containers,
        bootstrap_bytes=bootstrap, n_gaussians=len(key),
    )


def derive_schedule_by_sweep(key: GaussianFrame, codebooks, specs,
                             camera: Camera) -> LodSchedule:
    """Order enhancement layers by measured PSNR gain: each attribute is
    decoded with one more layer (others at full depth), rendered, scored
    against the uncompressed render, and the next-best layer is appended
    greedily."""
    q = quantize_frame(key, codebooks)
    gt = render(key, camera).color

    def frame_with(attr_layers: dict[str, int]) -> GaussianFrame:
        from .svq import set_attribute

        out = key.copy()
        for name, cb in codebooks.items():
            values = decode(q[name], cb, attr_layers[name])
            set_attribute(out, name, values)
        return out

    full = {name: codebooks[name].spec.n_layers for name in codebooks}
    gains = {}
    for name in codebooks:
        layers = dict(full)
        prev_psnr = None
        for k in range(1, full[name] + 1):
            layers[name] = k
            score = psnr(render(frame_with(layers), camera).color, gt)
            if prev_psnr is not None:
                gains[(name, k)] = score - prev_psnr
            prev_psnr = score

    next_layer = {name: 1 for name in codebooks}
    entries = []
    total = sum(full[n] - 1 for n in codebooks)
    while len(entries) < total:
        best = None
        for name in sorted(codebooks):
            k = next_layer[name]
            if k >= full[name]:
                continue
            gain = gains[(name, k + 1)] if (name, k + 1) in gains else 0.0
            if best is None or gain > best[0]:
                best = (gain, name, k)
        _, name, k = best
        entries.append((name, k))
        next_layer[name] += 1
    return LodSchedule(
        entries=entries,
        attribute_layer_counts={n: full[n] for n in codebooks},
    )


# ---------------------------------------------------------------------------
# client state
# ---------------------------------------------------------------------------

class ClientState:
    """Per-Gaussian codes and positions accumulated from received tiles."""

    def __init__(self, n: int, codebooks: dict[str, SvqCodebook],
                 schedule: LodSchedule, sh_degree: int):
        self.n = n
        self.codebooks = codebooks
        self.schedule = schedule
        self.sh_degree = sh_degree
        self.has = np.zeros(n, dtype=bool)
        self.positions = np.zeros((n, 3), dtype=np.float32)
        self.source_frame = np.full(n, -1, dtype=np.int64)
        self.level = np.full(n, -1, dtype=np.int64)
        self.segments = {
            name: np.zeros((n, cb.spec.n_layers), dtype=np.uint16)
            for name, cb in codebooks.items()
        }

    def apply_tile(self, container: TiledLodContainer, tile_id: int,
                   lod: int) -> None:
        from .tiling import read_tile_segments

        cf = container.frame_index
        ids, positions, segs = read_tile_segments(container, tile_id, lod)
        eligible = self.source_frame[ids] <= cf
        rows = ids[eligible]
        if len(rows) == 0:
            return
        self.has[rows] = True
        self.positions[rows] = positions[eligible]
        self.source_frame[rows] = cf
        self.level[rows] = lod
        for name, layer_segs in segs.items():
            store = self.segments[name]
            for j, seg in enumerate(layer_segs):
                store[rows, j] = seg[eligible]

    def build_frame(self, frame_index: int) -> GaussianFrame | None:
        ids = np.nonzero(self.has)[0]
        if len(ids) == 0:
            return None
        m = len(ids)
        frame = GaussianFrame(
            frame_index=frame_index,
            positions=self.positions[ids],
            scales=np.zeros((m, 3), dtype=np.float32),
            rotations=np.tile(np.array([1, 0, 0, 0], dtype=np.float32), (m, 1)),
            opacities=np.zeros(m, dtype=np.float32),
            sh=np.zeros((m, sh_coeff_count(self.sh_degree)), dtype=np.float32),
            sh_degree=self.sh_degree,
        )
        from .svq import set_attribute

        levels = self.level[ids]
        for lv in np.unique(levels):
            rows = np.nonzero(levels == lv)[0]
            counts = self.schedule.layers_for_level(int(lv))
            for name, cb in self.codebooks.items():
                k = counts[name]
                seg_rows = self.segments[name][ids[rows]]
                q = QuantizedAttribute(
                    name=name,
                    layer_widths=cb.spec.layer_widths[:k],
                    segments=[seg_rows[:, j] for j in range(k)],
                )
                set_attribute(frame, name, decode(q, cb, k), ids=rows)
        return frame


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def _resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    from .prpa import _bilinear_sample

    src_h, src_w = image.shape[:2]
    js = np.linspace(0, src_h - 1, height)
    is_ = np.linspace(0, src_w - 1, width)
    gi, gj = np.meshgrid(is_, js)
    return _bilinear_sample(np.asarray(image, dtype=np.float64), gi, gj)


@dataclass
class SimResult:
    report: QualityReport
    plans: list[SelectionPlan]
    encoded: EncodedVideo


def simulate(config: SimConfig, frames, trace: list[ViewportSample],
             bandwidth: BandwidthTrace, fov_model: FovLstm | None = None,
             encoded: EncodedVideo | None = None) -> SimResult:
    """Run the full streaming loop.

    When the trace is longer than the video, its leading samples act as
    the initialization period: they prime viewport prediction history
    (and FoV refreshes) but are not streamed or scored.
    """
    full_frames = reconstruct_frames(frames)
    n_frames = min(len(full_frames), len(trace))
    offset = max(len(trace) - len(full_frames), 0)
    encoded = encoded or encode_video(frames, config)
    codebooks, schedule = encoded.codebooks, encoded.schedule

    geometry = config.geometry()
    lead = config.buffer_frames - 1
    diameter = scene_diameter(full_frames[0])
    depth_threshold = max(config.depth_threshold_frac * diameter, 1e-6)

    if config.adaptive_fov:
        if fov_model is None:
            raise GsvvError("adaptive FoV requires a trained model")
        fov_scales = rolling_predict(
            fov_model, trace, horizon=config.buffer_frames,
            refresh_period=config.refresh_period, geometry=geometry,
        )
    else:
        fov_scales = [FovScale(config.fixed_fov_scale, config.fixed_fov_scale)
                      for _ in range(len(trace))]

    planner = TilePlanner()
    client = ClientState(encoded.n_gaussians, codebooks, schedule,
                         full_frames[0].sh_degree)
    bootstrap = encoded.bootstrap_bytes
    if fov_model is not None:
        bootstrap += 16 + 4 * sum(v.size for v in fov_model.params.values())
    report = QualityReport(bootstrap_bytes=bootstrap)
    plans = []
    ref_raw_bytes = config.ref_width * config.ref_height * 3
    ref_overhead = int(ref_raw_bytes * config.reference_overhead)

    for i in range(n_frames):
        planner.register_container(encoded.containers[i])

        ti = offset + i
        actual_cam = trace[ti].camera(config.fov_x, config.fov_y,
                                      config.width, config.height)
        pred_sample, _ = viewport_for_frame(trace, ti, lead)
        s = fov_scales[ti]
        ref_fov_x, ref_fov_y = s.apply(config.fov_x, config.fov_y)
        ref_cam = Camera.from_pose(
            pred_sample.position, pred_sample.rotation,
            ref_fov_x, ref_fov_y, config.ref_width, config.ref_height,
        )
        # references render from the unquantized frames kept server-side,
        # so their colors are accurate
        ref_out = render(full_frames[i], ref_cam,
                         vis_threshold=config.vis_threshold)

        budget_total, _clamped = frame_budget(bandwidth, trace[ti].timestamp,
                                              config.fps)
        budget = max(budget_total - ref_overhead, 0)
        plan = planner.select(i, ref_out.visible_ids, budget)
        plans.append(plan)
        for entry in plan.entries:
            container = encoded.containers[entry.container_frame]
            client.apply_tile(container, entry.tile_id, entry.lod_level)

        client_frame = client.build_frame(i)
        if client_frame is None:
            distorted = np.zeros((config.height, config.width, 3), dtype=np.float64)
            depth = np.zeros((config.height, config.width), dtype=np.float64)
        else:
            client_out = render(client_frame, actual_cam,
                                vis_threshold=config.vis_threshold)
            distorted = client_out.color.astype(np.float64)
            depth = client_out.depth.astype(np.float64)

        gt = render(full_frames[i], actual_cam,
                    vis_threshold=config.vis_threshold).color.astype(np.float64)

        uncovered_frac = float("nan")
        if config.enable_prpa:
            result = align(AlignmentInputs(
                reference=ref_out.color.astype(np.float64),
                depth=depth,
                cam_client=actual_cam,
                cam_reference=ref_cam,
                kernel=config.kernel,
                depth_threshold=depth_threshold,
            ))
            aligned = result.aligned
            guidance = result.valid_mask
            uncovered_frac = float(result.uncovered_mask.mean())
        else:
            aligned = _resize_bilinear(ref_out.color, config.height, config.width)
            guidance = np.ones((config.height, config.width), dtype=bool)

        restored = restore(RestoreInputs(
            distorted=distorted, aligned_ref=aligned,
            guidance_mask=guidance, window=config.restore_window,
        ))

        report.add_frame(
            frame=i,
            psnr_distorted=psnr(distorted, gt),
            psnr_restored=psnr(restored, gt),
            ssim_restored=ssim(restored, gt),
            bytes_sent=plan.spent_bytes + ref_overhead,
            budget_bytes=budget_total,
            starved=int(plan.starved),
            uncovered_frac=uncovered_frac,
            fov_sx=s.sx,
            fov_sy=s.sy,
            visible=len(ref_out.visible_ids),
        )

        if config.save_images:
            import os

            os.makedirs(config.save_images, exist_ok=True)
            save_png(distorted, f"{config.save_images}/frame_{i:05d}_distorted.png")
            save_png(restored, f"{config.save_images}/frame_{i:05d}_restored.png")
            save_png(gt, f"{config.save_images}/frame_{i:05d}_gt.png")

    return SimResult(report=report, plans=plans, encoded=encoded)
