"""Command-line interface.

Subcommands: synth, track, recon-mesh, recon-gs, deform, render, eval,
run. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig, load_config
from .errors import ConfigError, DataError, DivergenceError, NonFiniteGradientError, SurfsplatError


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise ConfigError(f"--size expects WxH, got '{text}'") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="surfsplat", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic deforming-surface dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--preset", default="bend", choices=["plane", "bend", "pulse"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--size", default="128x128", help="WxH")
    s.add_argument("--noise", nargs=2, type=float, metavar=("SIGMA_D", "SIGMA_C"), default=None)

    s = sub.add_parser("track", help="detect and chain sparse keypoint tracks")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--import", dest="import_file", default=None, help="ingest externally computed tracks")
    s.add_argument("--min-len", type=int, default=3)

    s = sub.add_parser("recon-mesh", help="stage 1: SDF reconstruction and mesh extraction")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iters", type=int, default=2000)
    s.add_argument("--grid", type=int, default=96)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("recon-gs", help="stage 2: mesh-restricted splat fitting")
    s.add_argument("--data", required=True)
    s.add_argument("--mesh", required=True)
    s.add_argument("--out", required=True, help="output scene PLY")
    s.add_argument("--iters", type=int, default=3000)
    s.add_argument("--gamma1", type=float, default=1.0)
    s.add_argument("--gamma2", type=float, default=0.5)

    s = sub.add_parser("deform", help="stage 3: per-frame semi-rigid deformation")
    s.add_argument("--data", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--tracks", required=True)
    s.add_argument("--mesh", default=None, help="binding mesh (graph neighborhoods)")
    s.add_argument("--out", required=True, help="output sequence directory")
    s.add_argument("--r", type=int, default=8)
    s.add_argument("--rho", type=float, default=0.0, help="0 = 10x median mesh edge")
    s.add_argument("--iters", type=int, default=300)

    s = sub.add_parser("render", help="rasterize a scene checkpoint to a PNG")
    s.add_argument("--scene", required=True)
    s.add_argument("--camera", required=True, help="cameras.json")
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--size", default=None, help="WxH (default: 2*cx x 2*cy)")

    s = sub.add_parser("eval", help="evaluate a reconstructed sequence against a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--seq", required=True, help="sequence manifest.json")
    s.add_argument("--out", required=True, help="metrics JSON path")

    s = sub.add_parser("run", help="full three-stage pipeline")
    s.add_argument("--config", default=None)
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--preset")
    s.add_argument("--frames", type=int)
    s.add_argument("--size")
    s.add_argument("--grid", type=int, dest="grid_res")
    s.add_argument("--sdf-iters", type=int, dest="sdf_iters")
    s.add_argument("--surface-iters", type=int, dest="surface_iters")
    s.add_argument("--deform-iters", type=int, dest="deform_iters")
    s.add_argument("--rho", type=float)
    s.add_argument("--r", type=int)
    s.add_argument("--no-surface-aware", action="store_true", default=None)
    s.add_argument("--no-arap", action="store_true", default=None)
    s.add_argument("--no-global", action="store_true", default=None)
    return p


def _cmd_synth(args) -> int:
    from .synth import generate_sequence, preset_config

    w, h = _parse_size(args.size)
    overrides = dict(width=w, height=h, frames=args.frames, seed=args.seed)
    if args.noise is not None:
        overrides["noise_depth"], overrides["noise_color"] = args.noise
    cfg = preset_config(args.preset, **overrides)
    generate_sequence(cfg, args.out)
    print(f"wrote {args.frames} frames to {args.out}")
    return 0


def _cmd_track(args) -> int:
    from .dataset import load_dataset
    from .tracks import TrackerConfig, build_tracks, load_tracks, save_tracks

    frames = load_dataset(args.data)
    if args.import_file:
        tracks = load_tracks(args.import_file, num_frames=len(frames))
    else:
        tracks = build_tracks(frames, TrackerConfig(min_len=args.min_len))
    save_tracks(args.out, tracks)
    print(f"wrote {len(tracks)} tracks to {args.out}")
    return 0


def _cmd_recon_mesh(args) -> int:
    from .dataset import load_dataset
    from .mesh import marching_cubes, save_obj
    from .sdfgrid import save_grid
    from .sdfrecon import SdfReconConfig, optimize_sdf

    frames = load_dataset(args.data)
    cfg = SdfReconConfig(grid_res=args.grid, iters=args.iters, seed=args.seed)
    sdf, color, info = optimize_sdf(frames[0], cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_grid(out / "sdf.grid", sdf)
    save_grid(out / "color.grid", color)
    mesh = marching_cubes(sdf)
    save_obj(out / "mesh.obj", mesh)
    print(f"wrote {out / 'mesh.obj'} with {len(mesh)} triangles")
    return 0


def _cmd_recon_gs(args) -> int:
    from .dataset import load_dataset
    from .gaussians import save_ply
    from .mesh import load_obj
    from .surface import SurfaceReconConfig, optimize_first_frame

    frames = load_dataset(args.data)
    mesh = load_obj(args.mesh)
    cfg = SurfaceReconConfig(iters=args.iters, gamma1=args.gamma1, gamma2=args.gamma2)
    scene, binding, metrics = optimize_first_frame(frames[0], mesh, cfg)
    save_ply(args.out, scene)
    print(f"wrote {args.out}: {len(scene)} kernels, masked PSNR {metrics['psnr']:.2f} dB")
    return 0


def _cmd_deform(args) -> int:
    from .dataset import load_dataset
    from .deform import DeformConfig, DeformationState, optimize_frame, save_state_ply
    from .gaussians import load_ply
    from .mesh import load_obj
    from .neighbors import build_euclidean_neighborhoods, build_neighborhoods
    from .surface import BindingMap
    from .tracks import assign_regions, load_tracks

    frames = load_dataset(args.data)
    scene, _ = load_ply(args.scene)
    tracks = load_tracks(args.tracks, num_frames=len(frames))
    if args.mesh:
        mesh = load_obj(args.mesh)
        if len(mesh) != len(scene):
            raise DataError("scene kernel count does not match mesh triangle count")
        binding = BindingMap(triangle_of=np.arange(len(scene)), rest_positions=mesh.centroids)
        graph = build_neighborhoods(scene.positions, binding, mesh, r=args.r)
        median_edge = mesh.median_edge_length()
    else:
        graph = build_euclidean_neighborhoods(scene.positions, r=args.r)
        src, dst, _ = graph.pairs()
        median_edge = float(np.median(np.linalg.norm(scene.positions[dst] - scene.positions[src], axis=1)))
    rho = args.rho if args.rho > 0 else 10.0 * median_edge
    regions = assign_regions(scene, tracks, rho)
    cfg = DeformConfig(iters=args.iters, rho=rho)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state0 = DeformationState(frame=0, positions=scene.positions, rotations=scene.rotations)
    manifest = {"scene": str(args.scene), "frames": [{"t": 0, "checkpoint": str(args.scene)}]}
    prev = state0
    for t in range(1, len(frames)):
        state, metrics = optimize_frame(t, prev, state0, scene, frames[t], tracks, graph, regions, cfg)
        name = f"frame_{t:04d}.ply"
        save_state_ply(out / name, state, scene)
        manifest["frames"].append({"t": t, "checkpoint": name})
        print(f"frame {t}: PSNR {metrics['psnr']:.2f} dB")
        prev = state
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return 0


def _cmd_render(args) -> int:
    from .camera import Camera
    from .gaussians import load_ply
    from .imageio import write_png
    from .splat import rasterize

    scene, _ = load_ply(args.scene)
    cam_path = Path(args.camera)
    if not cam_path.exists():
        raise DataError(f"missing camera file: {cam_path}")
    with open(cam_path) as fh:
        meta = json.load(fh)
    entries = {e["index"]: e for e in meta.get("frames", [])}
    if args.frame not in entries:
        raise DataError(f"camera file has no frame {args.frame}")
    e = entries[args.frame]
    camera = Camera(
        intrinsics=np.array(e["intrinsics"], dtype=float),
        pose=np.array(e["pose"], dtype=float),
        near=float(e["near"]),
        far=float(e["far"]),
    )
    if args.size:
        w, h = _parse_size(args.size)
    else:
        w, h = int(round(2 * camera.cx)), int(round(2 * camera.cy))
    out = rasterize(scene, camera, w, h, np.zeros(3))
    write_png(args.out, out.color)
    print(f"wrote {args.out} ({w}x{h})")
    return 0


def _cmd_eval(args) -> int:
    from .dataset import load_dataset
    from .gaussians import load_ply
    from .metrics import depth_rmse, psnr, ssim
    from .splat import rasterize
    from .synth import GroundTruth

    frames = load_dataset(args.data)
    seq_path = Path(args.seq)
    if not seq_path.exists():
        raise DataError(f"missing sequence manifest: {seq_path}")
    with open(seq_path) as fh:
        manifest = json.load(fh)
    gt_path = Path(args.data) / "ground_truth.json"
    gt = GroundTruth.load(gt_path) if gt_path.exists() else None
    by_t = {int(e["t"]): e["checkpoint"] for e in manifest["frames"]}
    per_frame = []
    for frame in frames:
        if frame.index not in by_t:
            continue
        ckpt = seq_path.parent / by_t[frame.index]
        scene, _ = load_ply(ckpt)
        rendered = rasterize(scene, frame.camera, frame.width, frame.height, np.zeros(3))
        gt_depth = gt.depth(frame.index) if gt is not None else frame.depth
        per_frame.append(
            {
                "t": frame.index,
                "psnr": psnr(rendered.color, frame.image, frame.mask),
                "ssim": ssim(rendered.color, frame.image, frame.mask),
                "depth_rmse": depth_rmse(rendered.depth, gt_depth, frame.mask),
            }
        )
    if not per_frame:
        raise DataError("manifest covers no dataset frames")
    report = {
        "frames": per_frame,
        "mean": {k: float(np.mean([f[k] for f in per_frame])) for k in ("psnr", "ssim", "depth_rmse")},
    }
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=1)
    print(json.dumps(report["mean"], indent=1))
    return 0


def _cmd_run(args) -> int:
    from .pipeline import run_pipeline

    cfg = load_config(args.config) if args.config else PipelineConfig()
    for key in (
        "data", "out", "seed", "preset", "frames", "grid_res", "sdf_iters",
        "surface_iters", "deform_iters", "rho", "r",
        "no_surface_aware", "no_arap", "no_global",
    ):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    if args.size:
        cfg.width, cfg.height = _parse_size(args.size)
    report = run_pipeline(cfg)
    print(json.dumps({"mean": report["mean"], "tracking": report["tracking"]}, indent=1))
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "track": _cmd_track,
    "recon-mesh": _cmd_recon_mesh,
    "recon-gs": _cmd_recon_gs,
    "deform": _cmd_deform,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "run": _cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (DivergenceError, NonFiniteGradientError) as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return 4
    except SurfsplatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
