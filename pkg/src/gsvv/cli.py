"""Command-line interface.

Verbs: encode, simulate, render, align, restore, train-fov, fov-eval,
gen-scene, metrics.  Exit codes: 0 success, 1 usage, 2 data error,
3 internal error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .errors import GsvvError, ParseError, ValidationError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_sequence(directory):
    from .gaussian_model import load_differential, load_frame

    names = sorted(os.listdir(directory))
    keys = [n for n in names if n.endswith(".gsvv")]
    diffs = [n for n in names if n.endswith(".gsvd")]
    if len(keys) != 1:
        raise ParseError(f"{directory}: expected exactly one .gsvv keyframe, "
                         f"found {len(keys)}")
    frames = [load_frame(os.path.join(directory, keys[0]), frame_index=0)]
    frames += [load_differential(os.path.join(directory, d)) for d in diffs]
    return frames


def _cmd_gen_scene(args):
    from .gaussian_model import save_differential, save_frame
    from .sim import SceneSpec, generate_scene, generate_trace
    from .viewport_fov import save_trace

    spec = SceneSpec(n_gaussians=args.n_gaussians, n_frames=args.n_frames,
                     seed=args.seed)
    frames = generate_scene(spec)
    os.makedirs(args.out, exist_ok=True)
    save_frame(frames[0], os.path.join(args.out, "frame_00000.gsvv"))
    for diff in frames[1:]:
        save_differential(
            diff, os.path.join(args.out, f"frame_{diff.frame_index:05d}.gsvd")
        )
    if args.trace_out:
        trace = generate_trace(args.trace_kind, args.n_frames, seed=args.seed)
        save_trace(trace, args.trace_out)
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def _cmd_encode(args):
    from .sim import SimConfig, derive_schedule_by_sweep, encode_video, parse_config_file
    from .renderer import Camera
    from .svq import save_codebooks
    from .tiling import save_container

    config = parse_config_file(args.config) if args.config else SimConfig()
    config.tile_size_key = args.tile_size_key
    config.tile_size_diff = args.tile_size_diff
    frames = _load_sequence(args.input)

    schedule = None
    if args.schedule == "sweep":
        from .sim import scene_diameter
        from .svq import build_codebook, default_attribute_specs, extract_attribute

        key = frames[0]
        specs = default_attribute_specs(sh_degree=key.sh_degree,
                                        top_bits=config.top_bits,
                                        init_bits=config.init_bits())
        codebooks = {
            name: build_codebook(extract_attribute(key, name), spec,
                                 sample_size=config.sample_size,
                                 seed=config.seed)[1]
            for name, spec in specs.items()
        }
        center = key.positions.mean(axis=0)
        cam = Camera.from_fov(config.fov_x, config.fov_y,
                              config.width, config.height,
                              t=np.array([-center[0], -center[1],
                                          -(center[2] - scene_diameter(key))]))
        schedule = derive_schedule_by_sweep(key, codebooks, specs, cam)
    encoded = encode_video(frames, config, schedule=schedule)

    os.makedirs(args.out, exist_ok=True)
    save_codebooks(encoded.codebooks, os.path.join(args.out, "codebooks.gscs"))
    for container in encoded.containers:
        save_container(container, os.path.join(
            args.out, f"frame_{container.frame_index:05d}.gsct"))
    total = sum(c.bytes_for_lod(c.n_levels - 1) for c in encoded.containers)
    print(f"encoded {len(encoded.containers)} containers, "
          f"{total} payload bytes, codebooks {encoded.bootstrap_bytes} bytes")
    return 0


def _cmd_render(args):
    from .gaussian_model import load_frame
    from .renderer import Camera, render, save_depth, save_png

    frame = load_frame(args.frame)
    with open(args.camera) as fh:
        cam = Camera.from_json(fh.read())
    out = render(frame, cam)
    save_png(out.color, args.out_color)
    if args.out_depth:
        save_depth(out.depth, args.out_depth)
    print(f"rendered {len(out.visible_ids)} visible Gaussians")
    return 0


def _cmd_align(args):
    from .prpa import AlignmentInputs, align
    from .renderer import Camera, load_depth, load_png, save_png

    with open(args.ref_cam) as fh:
        cam_r = Camera.from_json(fh.read())
    with open(args.client_cam) as fh:
        cam_l = Camera.from_json(fh.read())
    reference = load_png(args.ref)
    depth = load_depth(args.depth)
    result = align(AlignmentInputs(
        reference=reference, depth=depth, cam_client=cam_l, cam_reference=cam_r,
        kernel=args.kernel, depth_threshold=args.threshold,
    ))
    save_png(result.aligned, args.out)
    if args.out_mask:
        mask = np.stack([
            result.occluded_mask, result.valid_mask, result.uncovered_mask,
        ], axis=-1).astype(np.float64)
        save_png(mask, args.out_mask)
    print(f"occluded {int(result.occluded_mask.sum())} px, "
          f"filled {result.pixels_filled} px in {result.erosion_iterations} iterations")
    return 0


def _cmd_restore(args):
    from .renderer import load_png, save_png
    from .restore import RestoreInputs, restore

    distorted = load_png(args.distorted)
    reference = load_png(args.ref)
    if args.mask:
        mask = load_png(args.mask)[:, :, 1] > 0.5  # valid channel
    else:
        mask = np.ones(distorted.shape[:2], dtype=bool)
    out = restore(RestoreInputs(distorted=distorted, aligned_ref=reference,
                                guidance_mask=mask, window=args.window))
    save_png(out, args.out)
    print(f"restored image written to {args.out}")
    return 0


def _cmd_train_fov(args):
    from .viewport_fov import FovGeometry, FovLstm, load_trace, save_model, train_fov

    paths = sorted(
        os.path.join(args.traces, n) for n in os.listdir(args.traces)
        if n.endswith(".csv")
    )
    if not paths:
        raise ParseError(f"{args.traces}: no .csv traces found")
    traces = [load_trace(p) for p in paths]
    model = FovLstm(hidden=args.hidden)
    model.params = model.init_params(seed=args.seed)
    model, losses = train_fov(model, traces, epochs=args.epochs, lr=args.lr,
                              horizon=args.horizon)
    save_model(model, args.out)
    print(f"trained on {len(traces)} traces; "
          f"loss {losses[0]:.5f} -> {losses[-1]:.5f}" if losses else "no epochs run")
    return 0


def _cmd_fov_eval(args):
    from .viewport_fov import (
        FovGeometry, load_model, load_trace, oracle_scales, rolling_predict,
    )

    trace = load_trace(args.trace)
    model = load_model(args.ckpt)
    geometry = FovGeometry()
    scales = rolling_predict(model, trace, horizon=args.horizon,
                             refresh_period=args.refresh, geometry=geometry)
    oracle = oracle_scales(trace, args.horizon, geometry)
    pred = np.array([[s.sx, s.sy] for s in scales])
    mae = float(np.mean(np.abs(pred - oracle)))
    print(f"frames {len(trace)}  scale MAE {mae:.5f}  "
          f"mean predicted s ({pred[:, 0].mean():.4f}, {pred[:, 1].mean():.4f})")
    return 0


def _cmd_metrics(args):
    from .metrics import psnr, ssim
    from .renderer import load_png

    a = load_png(args.a)
    b = load_png(args.b)
    print(f"psnr {psnr(a, b):.4f} dB  ssim {ssim(a, b):.5f}")
    return 0


def _cmd_simulate(args):
    from .adaptation import BandwidthTrace, load_bandwidth_trace, write_plan_csv
    from .sim import SimConfig, parse_config_file, simulate
    from .viewport_fov import load_model, load_trace

    config = parse_config_file(args.config) if args.config else SimConfig()
    if args.mbps is not None:
        bandwidth = BandwidthTrace.fixed(args.mbps)
    elif args.bandwidth:
        bandwidth = load_bandwidth_trace(args.bandwidth)
    else:
        raise ParseError("simulate needs --mbps or --bandwidth")
    frames = _load_sequence(args.scene)
    trace = load_trace(args.trace)
    model = load_model(args.ckpt) if args.ckpt else None
    if model is None and config.adaptive_fov:
        config.adaptive_fov = False
    result = simulate(config, frames, trace, bandwidth, fov_model=model)
    result.report.write_csv(args.report)
    if args.plan:
        write_plan_csv(result.plans, args.plan)
    if args.plot:
        _plot_report(result.report, args.plot)
    agg = result.report.aggregate("psnr_restored")
    dist = result.report.aggregate("psnr_distorted")
    sent = result.report.column("bytes_sent").sum()
    print(f"frames {len(result.report.frames)}  "
          f"restored PSNR mean {agg['mean']:.3f} dB (min {agg['min']:.3f})  "
          f"distorted PSNR mean {dist['mean']:.3f} dB  "
          f"bytes {int(sent)} (+{result.report.bootstrap_bytes} bootstrap)")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="gsvv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene")
    p.add_argument("--out", required=True)
    p.add_argument("--n-gaussians", type=int, default=1500)
    p.add_argument("--n-frames", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace-out", default="")
    p.add_argument("--trace-kind", default="smooth",
                   choices=["static", "smooth", "fast_turn"])
    p.set_defaults(func=_cmd_gen_scene)

    p = sub.add_parser("encode", help="quantize and containerize a sequence")
    p.add_argument("--input", required=True, help="frames directory")
    p.add_argument("--out", required=True, help="container directory")
    p.add_argument("--tile-size-key", type=int, default=8000)
    p.add_argument("--tile-size-diff", type=int, default=4000)
    p.add_argument("--schedule", default="default", choices=["default", "sweep"])
    p.add_argument("--config", default="")
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("render", help="render a frame")
    p.add_argument("--frame", required=True)
    p.add_argument("--camera", required=True, help="camera JSON file")
    p.add_argument("--out-color", required=True)
    p.add_argument("--out-depth", default="")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("align", help="perspective-align a reference image")
    p.add_argument("--ref", required=True)
    p.add_argument("--ref-cam", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--client-cam", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--out-mask", default="")
    p.add_argument("--kernel", type=int, default=2)
    p.add_argument("--threshold", type=float, default=0.1)
    p.set_defaults(func=_cmd_align)

    p = sub.add_parser("restore", help="reference-guided color restoration")
    p.add_argument("--distorted", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--mask", default="")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=8)
    p.set_defaults(func=_cmd_restore)

    p = sub.add_parser("train-fov", help="train the adaptive FoV model")
    p.add_argument("--traces", required=True, help="directory of trace CSVs")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--horizon", type=int, default=6)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train_fov)

    p = sub.add_parser("fov-eval", help="evaluate a FoV checkpoint on a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--horizon", type=int, default=6)
    p.add_argument("--refresh", type=int, default=1)
    p.set_defaults(func=_cmd_fov_eval)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two images")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("simulate", help="run the streaming simulator")
    p.add_argument("--scene", required=True, help="frames directory")
    p.add_argument("--trace", required=True, help="viewport trace CSV")
    p.add_argument("--bandwidth", default="", help="bandwidth trace CSV")
    p.add_argument("--mbps", type=float, default=None, help="fixed bandwidth")
    p.add_argument("--config", default="")
    p.add_argument("--report", required=True, help="output report CSV")
    p.add_argument("--plan", default="", help="optional plan dump CSV")
    p.add_argument("--plot", default="", help="optional per-frame PSNR plot PNG")
    p.add_argument("--ckpt", default="", help="FoV model checkpoint")
    p.set_defaults(func=_cmd_simulate)
    return parser


def _plot_report(report, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    frames = report.column("frame")
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(frames, report.column("psnr_distorted"), label="distorted")
    ax.plot(frames, report.column("psnr_restored"), label="restored")
    ax.set_xlabel("frame")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except (ParseError, ValidationError, GsvvError, FileNotFoundError) as exc:
        print(f"gsvv: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # internal error
        print(f"gsvv: internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
