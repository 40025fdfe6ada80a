"""Acceptance suite: every criterion runs at its stated tolerance and
prints one pass/fail line.  Run with `pytest tests/test_acceptance.py -v -s`.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from gsvv.adaptation import BandwidthTrace, TilePlanner
from gsvv.metrics import psnr
from gsvv.prpa import AlignmentInputs, align
from gsvv.renderer import Camera, render, unproject_pixels
from gsvv.sim import (
    SceneSpec,
    SimConfig,
    encode_video,
    generate_scene,
    generate_trace,
    simulate,
    yaw_quaternion,
)
from gsvv.svq import (
    AttributeSpec,
    build_codebook,
    decode,
    default_attribute_specs,
    encode,
    kmeans,
)
from gsvv.viewport_fov import (
    FovGeometry,
    FovLstm,
    approx_ground_truth_fov,
    loss_and_grads,
    train_fov,
)

MODULE_T0 = time.time()


def report(criterion, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    print(f"[{status}] criterion {criterion}: {detail}")
    assert passed, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------------------
# shared SVQ fixtures: per-video codebooks at the 66-bit allocation over
# seeded mixture data, plus 100 seeded frames drawn from the same mixtures
# ---------------------------------------------------------------------------

N_FRAMES = 100
FRAME_SIZE = 400


def _mixture(rng, dim, n, n_components=24, spread=4.0, sigma=0.25):
    means = rng.uniform(-spread, spread, size=(n_components, dim))
    labels = rng.integers(n_components, size=n)
    return means[labels] + rng.normal(0, sigma, size=(n, dim)), means


@pytest.fixture(scope="module")
def svq_setup():
    specs = default_attribute_specs(sh_degree=3, top_bits=4)
    rng = np.random.default_rng(2024)
    codebooks = {}
    trees = {}
    pools = {}
    for name, spec in specs.items():
        pool, _means = _mixture(rng, spec.dim, 20_000)
        tree, cb = build_codebook(pool, spec, sample_size=4096, seed=2024)
        codebooks[name] = cb
        trees[name] = tree
        pools[name] = pool
    frames = {}
    frame_rng = np.random.default_rng(77)
    for name in specs:
        pool = pools[name]
        frames[name] = [
            pool[frame_rng.choice(len(pool), size=FRAME_SIZE)]
            for _ in range(N_FRAMES)
        ]
    return specs, codebooks, trees, frames


def _ancestor_table(tree, cb):
    """Independent tree walk: per coded leaf, the centroid at each
    cumulative width (the leaf itself once it is shallower)."""
    widths = cb.spec.cumulative_widths
    table = {}
    for leaf_id in tree.leaves:
        node = tree.nodes[leaf_id]
        padded = node.code << (cb.spec.init_bits - node.code_len)
        path = []
        walk = node
        while walk is not None:
            path.append(walk)
            walk = tree.nodes[walk.parent] if walk.parent is not None else None
        by_len = {n.code_len: n for n in path if n.code is not None}
        row = []
        for w in widths:
            anc = by_len.get(w)
            if anc is None:  # shallower leaf, padded bits resolve to it
                anc = node
                for n in path:
                    if n.code is not None and n.code_len <= w and n.code_len > anc.code_len:
                        anc = n
            row.append(anc.centroid.astype(np.float32))
        table[padded] = row
    return table


def test_criterion_1_ancestor_property(svq_setup):
    t0 = time.time()
    specs, codebooks, trees, frames = svq_setup
    checked = 0
    for name, spec in specs.items():
        cb = codebooks[name]
        table = _ancestor_table(trees[name], cb)
        for vectors in frames[name]:
            q = encode(vectors, cb)
            codes = q.full_codes()
            expected = np.stack([
                np.stack(table[int(c)]) for c in codes
            ])  # (n, layers, dim)
            for k in range(1, cb.spec.n_layers + 1):
                got = decode(q, cb, k)
                if not np.array_equal(got, expected[:, k - 1]):
                    report(1, False, f"{name}: layer {k} mismatch")
            checked += len(vectors)
    elapsed = time.time() - t0
    report(1, elapsed < 60.0,
           f"ancestor property exact over {N_FRAMES} frames x "
           f"{len(specs)} attributes ({checked} vectors), {elapsed:.1f}s < 60s")


def test_criterion_2_monotone_refinement(svq_setup):
    specs, codebooks, _trees, frames = svq_setup
    violations = 0
    for name in specs:
        cb = codebooks[name]
        for vectors in frames[name]:
            q = encode(vectors, cb)
            prev = None
            for k in range(1, cb.spec.n_layers + 1):
                mse = float(np.mean(
                    (decode(q, cb, k).astype(np.float64) - vectors) ** 2))
                if prev is not None and mse > prev + 1e-12:
                    violations += 1
                prev = mse
    report(2, violations == 0,
           f"per-attribute MSE non-increasing over {N_FRAMES} frames, "
           f"{violations} violations")


def test_criterion_3_svq_vs_flat_kmeans():
    rng = np.random.default_rng(314)
    means = rng.uniform(-6, 6, size=(16, 3))
    data = means[rng.integers(16, size=12_000)] + rng.normal(
        0, 0.15, size=(12_000, 3))
    spec = AttributeSpec(name="scale", dim=3, init_bits=8, top_bits=4)
    _tree, cb = build_codebook(data, spec, sample_size=4096, seed=314)
    q = encode(data, cb)
    svq_mse = float(np.mean(
        (decode(q, cb, cb.spec.n_layers).astype(np.float64) - data) ** 2))

    sample = data[np.random.default_rng(314).choice(len(data), size=4096,
                                                    replace=False)]
    centroids, _ = kmeans(sample, 2 ** 8, seed=314)
    d2 = (np.sum(data * data, axis=1)[:, None] - 2 * data @ centroids.T
          + np.sum(centroids * centroids, axis=1)[None])
    flat_mse = float(np.mean(
        (centroids[np.argmin(d2, axis=1)] - data) ** 2))
    ratio = svq_mse / flat_mse
    report(3, ratio <= 1.1,
           f"full-depth SVQ MSE {svq_mse:.6g} vs flat KMeans {flat_mse:.6g}, "
           f"ratio {ratio:.4f} <= 1.1")


def test_criterion_4_encode_exact(svq_setup):
    specs, codebooks, _trees, _frames = svq_setup
    cb = codebooks["scale"]
    rng = np.random.default_rng(4242)
    vectors = rng.normal(0, 3.0, size=(10_000, 3))
    q = encode(vectors, cb)
    got = q.full_codes()
    mismatches = 0
    for i in range(len(vectors)):
        d = np.sum((cb.leaf_centroids - vectors[i]) ** 2, axis=1)
        if got[i] != cb.leaf_codes[int(np.argmin(d))]:
            mismatches += 1
    report(4, mismatches == 0,
           f"nearest-leaf assignment equals exhaustive scan on 10k vectors, "
           f"{mismatches} mismatches")


def test_criterion_5_prpa_identity():
    rng = np.random.default_rng(5)
    h, w = 120, 160
    reference = rng.uniform(0, 1, size=(h, w, 3))
    depth = rng.uniform(1, 9, size=(h, w))
    cam = Camera.from_fov(1.48, 1.20, w, h)
    out = align(AlignmentInputs(
        reference=reference, depth=depth, cam_client=cam, cam_reference=cam,
        kernel=2, depth_threshold=0.05, sampling="nearest",
    ))
    ok = (np.array_equal(out.aligned, reference)
          and not out.occluded_mask.any() and out.valid_mask.all())
    report(5, ok, "identity cameras reproduce the reference bit-exactly, "
                  "occlusion set empty")


def test_criterion_6_prpa_occlusion_band():
    h, w = 120, 160
    fx = 120.0
    d_near, d_far, baseline = 2.0, 4.0, 1.0
    strip = (62, 100)
    cam_l = Camera(K=[[fx, 0, w / 2], [0, fx, h / 2], [0, 0, 1]],
                   R=np.eye(3), t=np.zeros(3), width=w, height=h)
    cam_r = Camera(K=[[fx, 0, w / 2], [0, fx, h / 2], [0, 0, 1]],
                   R=np.eye(3), t=np.array([-baseline, 0, 0]),
                   width=w, height=h)
    depth = np.full((h, w), d_far)
    depth[:, strip[0]:strip[1] + 1] = d_near
    u = np.arange(w, dtype=np.float64)
    x_hit = baseline + ((u - w / 2) / fx * d_far - baseline) * d_near / d_far
    lo = (strip[0] - w / 2) / fx * d_near
    hi = (strip[1] - w / 2) / fx * d_near
    covered_far = (u - fx * baseline / d_far >= 0)
    band_cols = (x_hit >= lo) & (x_hit <= hi) & (depth[0] == d_far) & covered_far
    analytic = np.tile(band_cols, (h, 1))

    rng = np.random.default_rng(6)
    reference = rng.uniform(0, 1, size=(h, w, 3))
    detected = align(AlignmentInputs(
        reference=reference, depth=depth, cam_client=cam_l, cam_reference=cam_r,
        kernel=2, depth_threshold=0.3,
    ), erode=False)
    iou = ((analytic & detected.occluded_mask).sum()
           / (analytic | detected.occluded_mask).sum())
    eroded = align(AlignmentInputs(
        reference=reference, depth=depth, cam_client=cam_l, cam_reference=cam_r,
        kernel=2, depth_threshold=0.3,
    ))
    report(6, iou >= 0.95 and 0 < eroded.erosion_iterations <= h + w
           and not eroded.fallback_used,
           f"occlusion band IoU {iou:.4f} >= 0.95, erosion finished in "
           f"{eroded.erosion_iterations} <= {h + w} iterations")


def test_criterion_7_prpa_homography():
    from gsvv.renderer import quat_to_rot
    from gsvv.viewport_fov import quat_mul

    h, w = 120, 160
    rng = np.random.default_rng(7)
    reference = rng.uniform(0, 1, size=(h, w, 3))
    depth = rng.uniform(2, 8, size=(h, w))
    cam_l = Camera(K=[[130, 0, w / 2], [0, 130, h / 2], [0, 0, 1]],
                   R=np.eye(3), t=np.zeros(3), width=w, height=h)
    qy = np.array([np.cos(0.035), 0, np.sin(0.035), 0])
    qp = np.array([np.cos(0.02), np.sin(0.02), 0, 0])
    rd = quat_to_rot(quat_mul(qy, qp))
    cam_r = Camera(K=cam_l.K, R=rd, t=np.zeros(3), width=w, height=h)
    out = align(AlignmentInputs(
        reference=reference, depth=depth, cam_client=cam_l, cam_reference=cam_r,
        kernel=2, depth_threshold=0.5,
    ), erode=False)

    hmat = cam_r.K @ rd @ np.linalg.inv(cam_l.K)
    vs, us = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")
    pts = np.stack([us, vs, np.ones_like(us)], axis=-1) @ hmat.T
    iw = pts[..., 0] / pts[..., 2]
    jw = pts[..., 1] / pts[..., 2]
    inb = (iw >= 0) & (iw <= w - 1) & (jw >= 0) & (jw <= h - 1)
    i0 = np.floor(iw[inb]).astype(int)
    j0 = np.floor(jw[inb]).astype(int)
    i1 = np.minimum(i0 + 1, w - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    fi = (iw[inb] - i0)[:, None]
    fj = (jw[inb] - j0)[:, None]
    expected = (reference[j0, i0] * (1 - fi) * (1 - fj)
                + reference[j0, i1] * fi * (1 - fj)
                + reference[j1, i0] * (1 - fi) * fj
                + reference[j1, i1] * fi * fj)
    covered = ~out.uncovered_mask[inb]
    err = np.abs(out.aligned[inb] - expected).max(axis=-1)
    frac = float((err[covered] <= 1.0 / 255.0).mean())
    report(7, frac >= 0.99,
           f"pure-rotation warp within 1 gray level on {frac:.4%} "
           f"of covered pixels (>= 99%)")


GEOM = FovGeometry(fov_x=1.48, fov_y=1.20, width=160, height=120)


def test_criterion_8_fov_oracle_coverage():
    base = Camera.from_pose([0, 0, 0], [1, 0, 0, 0], GEOM.fov_x, GEOM.fov_y,
                            160, 120)
    s0 = approx_ground_truth_fov(base, base, 10.0)
    identity_ok = abs(s0.sx) < 1e-9 and abs(s0.sy) < 1e-9

    rng = np.random.default_rng(808)
    us, vs = np.meshgrid(np.arange(160, dtype=float),
                         np.arange(120, dtype=float))
    worst = 1.0
    for _ in range(100):
        yaw, pitch = rng.uniform(-0.2, 0.2, size=2)
        pos = rng.uniform(-0.5, 0.5, size=3)
        pred = Camera.from_pose(pos, yaw_quaternion(yaw, pitch),
                                GEOM.fov_x, GEOM.fov_y, 160, 120)
        s = approx_ground_truth_fov(pred, base, 10.0)
        fov_x, fov_y = s.apply(GEOM.fov_x, GEOM.fov_y)
        world = unproject_pixels(base, us.ravel(), vs.ravel(),
                                 np.full(us.size, 10.0))
        cam_pts = world @ pred.R.T + pred.t
        inside = (
            (cam_pts[:, 2] > 0)
            & (np.abs(np.arctan2(cam_pts[:, 0], cam_pts[:, 2])) <= fov_x / 2 + 1e-9)
            & (np.abs(np.arctan2(cam_pts[:, 1], cam_pts[:, 2])) <= fov_y / 2 + 1e-9)
        )
        worst = min(worst, float(inside.mean()))
    report(8, identity_ok and worst >= 0.99,
           f"identity scale (0,0); worst coverage over 100 perturbations "
           f"{worst:.4%} >= 99%")


def test_criterion_9_lstm_gradients_and_training():
    rng = np.random.default_rng(909)
    model = FovLstm(hidden=6)
    model.params = {k: rng.normal(0, 0.4, size=v.shape)
                    for k, v in model.params.items()}
    inputs = rng.normal(size=(6, 16))
    targets = rng.normal(0, 0.3, size=(6, 2))
    _loss, grads = loss_and_grads(model, inputs, targets)
    eps = 1e-6
    worst = 0.0
    for name in grads:
        flat = model.params[name].reshape(-1)
        gflat = grads[name].reshape(-1)
        for idx in range(len(flat)):
            orig = flat[idx]
            flat[idx] = orig + eps
            from gsvv.viewport_fov import fov_loss
            lp = fov_loss(model.forward_sequence(inputs)[0], targets)
            flat[idx] = orig - eps
            lm = fov_loss(model.forward_sequence(inputs)[0], targets)
            flat[idx] = orig
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(fd - gflat[idx]) / max(abs(fd), abs(gflat[idx]), 1e-6))

    traces = [generate_trace("smooth", 40, seed=s) for s in (0, 1)]
    trained = FovLstm(hidden=16)
    trained.params = trained.init_params(seed=3)
    _, losses = train_fov(trained, traces, epochs=10, lr=1e-2, horizon=4,
                          geometry=GEOM)
    decreasing = losses[-1] < losses[0]
    report(9, worst < 1e-4 and decreasing,
           f"gradient check max relative error {worst:.2e} < 1e-4; "
           f"loss {losses[0]:.5f} -> {losses[-1]:.5f} over 10 epochs")


def test_criterion_10_adaptation_properties():
    from test_adaptation import fake_container

    def run(seed):
        rng = np.random.default_rng(seed)
        planner = TilePlanner()
        planner.register_container(fake_container(0, [25] * 10))
        plans = []
        history = {}
        violations = 0
        for frame in range(1000):
            visible = rng.choice(250, size=int(rng.integers(1, 200)),
                                 replace=False)
            budget = int(rng.integers(0, 1200))
            plan = planner.select(frame, visible, budget)
            if plan.spent_bytes > budget:
                violations += 1
            for key, lod in planner.sent_lod.items():
                if lod < history.get(key, -1):
                    violations += 1
                history[key] = lod
            plans.append(tuple(
                (e.container_frame, e.tile_id, e.lod_level, e.bytes)
                for e in plan.entries))
        return plans, violations

    plans_a, violations_a = run(1010)
    plans_b, violations_b = run(1010)
    deterministic = plans_a == plans_b

    # visibility priority: a tile outside the visible set receives nothing
    planner = TilePlanner()
    planner.register_container(fake_container(0, [10, 10, 10]))
    plan = planner.select(0, np.arange(10), budget=10**9)
    priority_ok = {e.tile_id for e in plan.entries} == {0}

    report(10, violations_a == 0 and violations_b == 0 and deterministic
           and priority_ok,
           f"1000 seeded frames: 0 budget/monotonicity violations, "
           f"deterministic plans, visibility priority holds")


# ---------------------------------------------------------------------------
# criterion 11: end-to-end desk-scale trends on a 60-frame scene
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def e2e_setup():
    scene = SceneSpec(n_gaussians=1200, n_frames=60, seed=1100,
                      motion_fraction=0.12)
    frames = generate_scene(scene)
    config = SimConfig(width=160, height=120, buffer_frames=6,
                       sample_size=2048, adaptive_fov=False,
                       tile_size_key=300, tile_size_diff=150)
    encoded = encode_video(frames, config)
    trace = generate_trace("smooth", scene.n_frames + 8, seed=1101)
    return frames, config, encoded, trace


def test_criterion_11a_bandwidth_monotone(e2e_setup):
    frames, config, encoded, trace = e2e_setup
    means = []
    for mbps in (3.0, 6.0, 9.0, 12.0, 15.0):
        result = simulate(config, frames, trace, BandwidthTrace.fixed(mbps),
                          encoded=encoded)
        means.append(result.report.aggregate("psnr_restored")["mean"])
    ok = all(b >= a - 0.2 for a, b in zip(means, means[1:]))
    report("11a", ok,
           "mean PSNR across {3,6,9,12,15} Mbps = "
           + ", ".join(f"{m:.2f}" for m in means) + " dB (non-decreasing)")


def test_criterion_11b_restoration_improves(e2e_setup):
    frames, config, encoded, trace = e2e_setup
    result = simulate(config, frames, trace, BandwidthTrace.fixed(15.0),
                      encoded=encoded)
    rows = result.report.frames
    wins = sum(1 for r in rows if r["psnr_restored"] >= r["psnr_distorted"])
    frac = wins / len(rows)
    report("11b", frac >= 0.9,
           f"restored >= distorted on {wins}/{len(rows)} frames "
           f"({frac:.1%} >= 90%)")


def test_criterion_11c_prpa_ablation(e2e_setup):
    frames, config, encoded, trace = e2e_setup
    on = simulate(config, frames, trace, BandwidthTrace.fixed(9.0),
                  encoded=encoded)
    off = simulate(replace(config, enable_prpa=False), frames, trace,
                   BandwidthTrace.fixed(9.0), encoded=encoded)
    mean_on = on.report.aggregate("psnr_restored")["mean"]
    mean_off = off.report.aggregate("psnr_restored")["mean"]
    report("11c", mean_on > mean_off,
           f"PRPA enabled {mean_on:.2f} dB > disabled {mean_off:.2f} dB")


def test_criterion_11d_adaptive_fov_ablation(e2e_setup):
    frames, config, encoded, _ = e2e_setup
    trace = generate_trace("fast_turn", 60 + 8, seed=1102)
    train_traces = [generate_trace("fast_turn", 60, seed=s) for s in (1, 2, 3)]
    model = FovLstm(hidden=16)
    model.params = model.init_params(seed=1103)
    model, _ = train_fov(model, train_traces, epochs=60, lr=3e-2, horizon=6,
                         geometry=GEOM)
    adaptive = simulate(replace(config, adaptive_fov=True), frames, trace,
                        BandwidthTrace.fixed(9.0), fov_model=model,
                        encoded=encoded)
    fixed = simulate(config, frames, trace, BandwidthTrace.fixed(9.0),
                     encoded=encoded)
    unc_a = float(adaptive.report.column("uncovered_frac").mean())
    unc_f = float(fixed.report.column("uncovered_frac").mean())
    report("11d", unc_a <= unc_f,
           f"uncovered-pixel fraction adaptive {unc_a:.4f} <= "
           f"fixed +10% {unc_f:.4f} on a fast-turn trace")


def test_criterion_12_decode_speed(svq_setup):
    _specs, codebooks, _trees, _frames = svq_setup
    cb = codebooks["scale"]  # 10-bit initialization, 4 layers
    rng = np.random.default_rng(1212)
    vectors = rng.normal(0, 3, size=(100_000, 3))
    q = encode(vectors, cb)
    worst_ms = 0.0
    for k in range(1, cb.spec.n_layers + 1):
        best = float("inf")
        for _ in range(5):
            t0 = time.perf_counter()
            decode(q, cb, k)
            best = min(best, time.perf_counter() - t0)
        worst_ms = max(worst_ms, best * 1e3)
    report(12, worst_ms < 50.0,
           f"decoding 100k codes takes at most {worst_ms:.2f} ms per layer "
           f"depth (< 50 ms)")


def test_suite_runtime_budget():
    elapsed = time.time() - MODULE_T0
    report("runtime", elapsed < 900.0,
           f"acceptance module finished in {elapsed:.0f}s (< 900s)")
