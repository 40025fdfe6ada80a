import numpy as np
import pytest

from gsvv.errors import GsvvError, ParseError, ValidationError
from gsvv.renderer import Camera
from gsvv.sim import generate_trace, yaw_quaternion
from gsvv.viewport_fov import (
    FovGeometry,
    FovLstm,
    SCALE_CAP,
    SCALE_FLOOR,
    ViewportSample,
    approx_ground_truth_fov,
    clip_gradients,
    fov_loss,
    load_model,
    load_trace,
    loss_and_grads,
    oracle_scales,
    predict_viewport,
    rolling_predict,
    save_model,
    save_trace,
    teacher_inputs,
    train_fov,
)

GEOM = FovGeometry(fov_x=1.48, fov_y=1.20, width=160, height=120)


def make_sample(i, pos, yaw=0.0, pitch=0.0, dt=1.0 / 30.0):
    return ViewportSample(frame_index=i, position=np.asarray(pos, dtype=float),
                          rotation=yaw_quaternion(yaw, pitch), timestamp=i * dt)


class TestTraces:
    def test_quaternion_norm_validated(self):
        with pytest.raises(ValidationError, match="norm"):
            ViewportSample(frame_index=0, position=np.zeros(3),
                           rotation=np.array([1.0, 0.0, 0.1, 0.0]),
                           timestamp=0.0)

    def test_csv_roundtrip(self, tmp_path):
        trace = generate_trace("smooth", 20, seed=3)
        path = tmp_path / "trace.csv"
        save_trace(trace, path)
        loaded = load_trace(path)
        assert len(loaded) == 20
        for a, b in zip(trace, loaded):
            assert a.frame_index == b.frame_index
            assert np.allclose(a.position, b.position)
            assert np.allclose(a.rotation, b.rotation)

    def test_nonincreasing_timestamps_rejected(self, tmp_path):
        path = tmp_path / "trace.csv"
        path.write_text(
            "frame,timestamp,px,py,pz,qw,qx,qy,qz\n"
            "0,0.0,0,0,0,1,0,0,0\n"
            "1,0.0,0,0,0,1,0,0,0\n"
        )
        with pytest.raises(ValidationError, match="increasing"):
            load_trace(path)


class TestPredictViewport:
    def test_static_history_holds(self):
        history = [make_sample(i, [1.0, 2.0, 3.0], yaw=0.3) for i in range(5)]
        preds, fallback = predict_viewport(history, horizon=4)
        assert not fallback
        for p in preds:
            assert np.allclose(p.position, [1.0, 2.0, 3.0])
            assert np.allclose(p.rotation, history[-1].rotation, atol=1e-9)

    def test_linear_motion_exact(self):
        history = [make_sample(i, [0.1 * i, -0.05 * i, 0.0]) for i in range(4)]
        preds, fallback = predict_viewport(history, horizon=3)
        assert not fallback
        for j, p in enumerate(preds, start=1):
            expect = np.array([0.1 * (3 + j), -0.05 * (3 + j), 0.0])
            assert np.allclose(p.position, expect, atol=1e-12)

    def test_constant_yaw_rate_extrapolates(self):
        rate = 0.04
        history = [make_sample(i, [0, 0, 0], yaw=rate * i) for i in range(4)]
        preds, _ = predict_viewport(history, horizon=2)
        for j, p in enumerate(preds, start=1):
            expect = yaw_quaternion(rate * (3 + j))
            assert np.allclose(np.abs(np.dot(p.rotation, expect)), 1.0, atol=1e-9)

    def test_insufficient_history_flags_fallback(self):
        preds, fallback = predict_viewport([make_sample(0, [1, 1, 1])], horizon=2)
        assert fallback
        assert np.allclose(preds[-1].position, [1, 1, 1])

    def test_circular_trace_beats_hold_last(self):
        # derived oracle: compare both predictors on a smooth circle
        n, horizon = 60, 6
        ts = np.arange(n) / 30.0
        trace = [make_sample(i, [np.cos(2 * np.pi * 0.3 * t),
                                 np.sin(2 * np.pi * 0.3 * t), 0.0])
                 for i, t in enumerate(ts)]
        errs_pred, errs_hold = [], []
        for i in range(10, n - horizon):
            preds, _ = predict_viewport(trace[:i + 1], horizon)
            actual = trace[i + horizon].position
            errs_pred.append(np.linalg.norm(preds[-1].position - actual))
            errs_hold.append(np.linalg.norm(trace[i].position - actual))
        assert np.mean(errs_pred) < np.mean(errs_hold)


def dense_coverage_scale(pred_cam: Camera, actual_cam: Camera, depth: float):
    """Exhaustive oracle: minimal centered FoV over every pixel center."""
    from gsvv.renderer import unproject_pixels

    us, vs = np.meshgrid(np.arange(actual_cam.width, dtype=float),
                         np.arange(actual_cam.height, dtype=float))
    world = unproject_pixels(actual_cam, us.ravel(), vs.ravel(),
                             np.full(us.size, depth))
    cam_pts = world @ pred_cam.R.T + pred_cam.t
    assert (cam_pts[:, 2] > 0).all()
    half_x = np.max(np.abs(np.arctan2(cam_pts[:, 0], cam_pts[:, 2])))
    half_y = np.max(np.abs(np.arctan2(cam_pts[:, 1], cam_pts[:, 2])))
    return (2 * half_x / actual_cam.fov_x - 1.0,
            2 * half_y / actual_cam.fov_y - 1.0)


class TestApproxGroundTruthFov:
    def cam(self, yaw=0.0, pitch=0.0, pos=(0, 0, 0), width=160, height=120):
        return Camera.from_pose(pos, yaw_quaternion(yaw, pitch),
                                GEOM.fov_x, GEOM.fov_y, width, height)

    def test_identical_cameras_zero(self):
        c = self.cam(yaw=0.25, pos=(1, 2, 3))
        s = approx_ground_truth_fov(c, c, 10.0)
        assert s.sx == pytest.approx(0.0, abs=1e-9)
        assert s.sy == pytest.approx(0.0, abs=1e-9)

    def test_pure_yaw_matches_planar_formula(self):
        dtheta = 0.12
        actual = self.cam()
        pred = self.cam(yaw=dtheta)
        s = approx_ground_truth_fov(pred, actual, 10.0)
        planar = 2 * np.arctan(np.tan(GEOM.fov_x / 2 + dtheta)) / GEOM.fov_x - 1
        assert s.sx == pytest.approx(planar, rel=0.05)
        dense = dense_coverage_scale(pred, actual, 10.0)
        assert s.sx == pytest.approx(dense[0], rel=1e-6, abs=1e-9)
        assert s.sy == pytest.approx(max(dense[1], SCALE_FLOOR - 1), abs=1e-9)

    def test_translation_sign_with_dense_oracle(self):
        actual = self.cam()
        # away from the fixed-depth plane: corners subtend less, s <= 0
        away = self.cam(pos=(0, 0, -2.0))
        s_away = approx_ground_truth_fov(away, actual, 10.0)
        dense = dense_coverage_scale(away, actual, 10.0)
        assert s_away.sx <= 0 and s_away.sy <= 0
        assert s_away.sx >= SCALE_FLOOR - 1 and s_away.sy >= SCALE_FLOOR - 1
        assert s_away.sx == pytest.approx(max(dense[0], SCALE_FLOOR - 1), abs=1e-9)
        # toward the plane: corners subtend more, s >= 0
        toward = self.cam(pos=(0, 0, 2.0))
        s_toward = approx_ground_truth_fov(toward, actual, 10.0)
        assert s_toward.sx >= 0 and s_toward.sy >= 0

    def test_corner_behind_camera_caps_with_flag(self):
        actual = self.cam()
        pred = self.cam(yaw=np.pi * 0.9)
        s = approx_ground_truth_fov(pred, actual, 10.0)
        assert s.capped
        assert s.sx <= SCALE_CAP + 1e-9

    def test_monotone_in_yaw_error(self):
        actual = self.cam()
        prev = (-10.0, -10.0)
        for dtheta in np.linspace(0.0, 0.5, 11):
            s = approx_ground_truth_fov(self.cam(yaw=dtheta), actual, 10.0)
            assert s.sx >= prev[0] - 1e-12
            assert s.sy >= prev[1] - 1e-12
            prev = (s.sx, s.sy)

    def test_scaled_reference_covers_actual_view(self):
        # coverage oracle over seeded perturbations (acceptance runs 100)
        rng = np.random.default_rng(17)
        for _ in range(20):
            yaw, pitch = rng.uniform(-0.18, 0.18, size=2)
            pos = rng.uniform(-0.4, 0.4, size=3)
            actual = self.cam()
            pred = self.cam(yaw=yaw, pitch=pitch, pos=pos)
            s = approx_ground_truth_fov(pred, actual, 10.0)
            fov_x, fov_y = s.apply(GEOM.fov_x, GEOM.fov_y)
            from gsvv.renderer import unproject_pixels
            us, vs = np.meshgrid(np.arange(160, dtype=float),
                                 np.arange(120, dtype=float))
            world = unproject_pixels(actual, us.ravel(), vs.ravel(),
                                     np.full(us.size, 10.0))
            cam_pts = world @ pred.R.T + pred.t
            inside = (
                (cam_pts[:, 2] > 0)
                & (np.abs(np.arctan2(cam_pts[:, 0], cam_pts[:, 2])) <= fov_x / 2 + 1e-9)
                & (np.abs(np.arctan2(cam_pts[:, 1], cam_pts[:, 2])) <= fov_y / 2 + 1e-9)
            )
            assert inside.mean() >= 0.99


class TestLstm:
    def test_zero_weights_output_head_bias(self):
        model = FovLstm(hidden=8)
        model.params = {k: np.zeros_like(v) for k, v in model.params.items()}
        model.params["b_out"] = np.array([0.3, -0.2])
        s, h, c, _ = model.step(np.ones(16), *model.zero_state())
        assert s == pytest.approx([0.3, -0.2])
        assert np.allclose(h, 0.0)

    def test_gradients_match_central_differences(self):
        rng = np.random.default_rng(21)
        model = FovLstm(hidden=6)
        model.params = {k: rng.normal(0, 0.4, size=v.shape)
                        for k, v in model.params.items()}
        inputs = rng.normal(size=(7, 16))
        targets = rng.normal(0, 0.3, size=(7, 2))
        loss, grads = loss_and_grads(model, inputs, targets)
        eps = 1e-6
        worst = 0.0
        for name, grad in grads.items():
            flat = model.params[name].reshape(-1)
            gflat = grad.reshape(-1)
            for idx in range(len(flat)):
                orig = flat[idx]
                flat[idx] = orig + eps
                lp = fov_loss(model.forward_sequence(inputs)[0], targets)
                flat[idx] = orig - eps
                lm = fov_loss(model.forward_sequence(inputs)[0], targets)
                flat[idx] = orig
                fd = (lp - lm) / (2 * eps)
                denom = max(abs(fd), abs(gflat[idx]), 1e-6)
                worst = max(worst, abs(fd - gflat[idx]) / denom)
        assert worst < 1e-4

    def test_repeated_input_converges_to_fixed_point(self):
        rng = np.random.default_rng(22)
        model = FovLstm(hidden=8)
        model.params = {k: rng.normal(0, 0.15, size=v.shape)
                        for k, v in model.params.items()}
        x = rng.normal(size=16)
        h, c = model.zero_state()
        prev_h = h
        for step in range(200):
            _, h, c, _ = model.step(x, h, c)
            if np.max(np.abs(h - prev_h)) < 1e-6:
                break
            prev_h = h
        assert step < 199

    def test_gradient_clipping(self):
        grads = {"a": np.full(4, 10.0)}
        clipped = clip_gradients(grads, max_norm=1.0)
        assert np.linalg.norm(clipped["a"]) == pytest.approx(1.0)
        small = {"a": np.full(4, 0.01)}
        assert clip_gradients(small, 1.0)["a"] is small["a"]


class TestTraining:
    def test_constant_target_learned(self):
        # trivially learnable constant: s = 0.2 on a static trace
        trace = [make_sample(i, [0, 0, 0]) for i in range(30)]
        inputs = teacher_inputs(trace, np.full((30, 2), 0.2))
        targets = np.full((30, 2), 0.2)
        model = FovLstm(hidden=8)
        model.params = model.init_params(seed=2)
        for _ in range(300):
            _, grads = loss_and_grads(model, inputs, targets)
            grads = clip_gradients(grads, 1.0)
            for k in model.params:
                model.params[k] -= 0.05 * grads[k]
        outputs, _ = model.forward_sequence(inputs)
        assert np.abs(outputs[5:] - 0.2).max() < 0.02

    def test_loss_decreases_over_first_epochs(self):
        traces = [generate_trace("smooth", 40, seed=s) for s in (0, 1)]
        model = FovLstm(hidden=16)
        model.params = model.init_params(seed=3)
        _, losses = train_fov(model, traces, epochs=10, lr=1e-2, horizon=4,
                              geometry=GEOM)
        assert all(a > b for a, b in zip(losses, losses[1:])), losses

    def test_zero_epochs_leaves_model_unchanged(self):
        model = FovLstm(hidden=8)
        before = {k: v.copy() for k, v in model.params.items()}
        trained, losses = train_fov(model, [generate_trace("smooth", 12, seed=0)],
                                    epochs=0, lr=1e-2, horizon=3, geometry=GEOM)
        assert losses == []
        for k in before:
            assert np.array_equal(trained.params[k], before[k])

    def test_divergence_raises(self):
        # a non-finite parameter state stands in for a diverged run
        traces = [generate_trace("fast_turn", 30, seed=0)]
        model = FovLstm(hidden=8)
        model.params["w_out"][:] = np.nan
        with pytest.raises(GsvvError, match="learning rate"):
            train_fov(model, traces, epochs=3, lr=1e-2, horizon=4,
                      geometry=GEOM)

    def test_short_trace_rejected(self):
        with pytest.raises(GsvvError, match="at least 8"):
            train_fov(FovLstm(hidden=8), [generate_trace("smooth", 4, seed=0)],
                      epochs=1, geometry=GEOM)


class TestRollingPredict:
    def test_degenerate_rollout_equals_teacher_forcing(self):
        from gsvv.viewport_fov import clamp_scale

        trace = generate_trace("smooth", 25, seed=5)
        model = FovLstm(hidden=8)
        model.params = model.init_params(seed=6)
        rolling = rolling_predict(model, trace, horizon=1, refresh_period=1,
                                  geometry=GEOM)
        oracle = oracle_scales(trace, 1, GEOM)
        teacher = teacher_inputs(trace, oracle)
        outputs, _ = model.forward_sequence(teacher)
        for t, scale in enumerate(rolling):
            assert scale.sx == pytest.approx(
                clamp_scale(outputs[t, 0], GEOM.fov_x), abs=1e-12)
            assert scale.sy == pytest.approx(
                clamp_scale(outputs[t, 1], GEOM.fov_y), abs=1e-12)

    def test_static_trace_small_drift(self):
        static = [make_sample(i, [0, 0, 0]) for i in range(40)]
        model = FovLstm(hidden=8)
        model.params = model.init_params(seed=8)
        model, _ = train_fov(model, [static], epochs=80, lr=3e-2, horizon=6,
                             geometry=GEOM)
        rolled = rolling_predict(model, static, horizon=6, refresh_period=6,
                                 geometry=GEOM)
        vals = np.array([[s.sx, s.sy] for s in rolled[6:]])
        assert np.abs(vals).max() < 0.05

    def test_refresh_not_worse_than_disabled(self):
        trace = generate_trace("fast_turn", 50, seed=9)
        model = FovLstm(hidden=16)
        model.params = model.init_params(seed=10)
        model, _ = train_fov(model, [generate_trace("fast_turn", 50, seed=11)],
                             epochs=40, lr=3e-2, horizon=6, geometry=GEOM)
        oracle = oracle_scales(trace, 6, GEOM)
        on = rolling_predict(model, trace, horizon=6, refresh_period=1,
                             geometry=GEOM)
        off = rolling_predict(model, trace, horizon=6, refresh_period=10**6,
                              geometry=GEOM)
        mae_on = np.abs(np.array([[s.sx, s.sy] for s in on]) - oracle).mean()
        mae_off = np.abs(np.array([[s.sx, s.sy] for s in off]) - oracle).mean()
        assert mae_on <= mae_off + 1e-9


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = FovLstm(hidden=12)
        model.params = model.init_params(seed=13)
        path = tmp_path / "model.gsfv"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.hidden == 12
        x = np.arange(16, dtype=float) / 16.0
        a, _, _, _ = model.step(x, *model.zero_state())
        b, _, _, _ = loaded.step(x, *loaded.zero_state())
        assert np.allclose(a, b, atol=1e-6)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.gsfv"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(ParseError):
            load_model(path)
