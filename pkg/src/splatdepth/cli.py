"""Command-line entry point: ``splatdepth {render,validate,fit,mesh,synth}``.

Exit codes: 0 success, 1 runtime error, 2 usage or format error,
3 validation failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as sio
from .errors import FitDivergedError, FormatError, SplatError
from .fit import FitSchedule, TargetView, depth_error, fit, held_out_l1, init_scene
from .fusion import extract_mesh, fuse_views
from .losses import LossWeights
from .rasterizer import RenderOptions, render
from .synthetic import orbit_cameras, plane_cameras, plane_depth, plane_generator, sphere_scene
from .validation import FAULTS, validate_scene

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION = 0, 1, 2, 3


class ValidationFailed(Exception):
    pass


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatdepth", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="render worker threads (default: all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", help="render color, depth, normal and opacity for every camera")
    r.add_argument("--scene", required=True, type=Path)
    r.add_argument("--cameras", required=True, type=Path)
    r.add_argument("--out", required=True, type=Path)
    r.add_argument("--median-threshold", type=_fraction, default=0.5)

    v = sub.add_parser("validate", help="check closed-form invariants on a scene")
    v.add_argument("--scene", required=True, type=Path)
    v.add_argument("--cameras", required=True, type=Path)
    v.add_argument("--trials", type=_positive_int, default=1000)
    v.add_argument("--skip-gradients", action="store_true", help="omit the finite-difference check")
    v.add_argument("--inject-fault", choices=FAULTS, default=None, help=argparse.SUPPRESS)

    f = sub.add_parser("fit", help="optimize splats against target views")
    f.add_argument("--targets", required=True, type=Path, help="directory with cameras.json and images")
    f.add_argument("--init", choices=("random", "plane", "file"), default="random")
    f.add_argument("--init-scene", type=Path, default=None, help="PLY used with --init file")
    f.add_argument("--splats", type=_positive_int, default=None, help="splat count for random/plane init")
    f.add_argument("--iters-phase1", type=_nonneg_int, default=2000)
    f.add_argument("--iters-phase2", type=_nonneg_int, default=2000)
    f.add_argument("--w-d", type=float, default=100.0)
    f.add_argument("--w-n", type=float, default=5.0)
    f.add_argument("--out", required=True, type=Path)
    f.add_argument("--trace", type=Path, default=None, help="loss-trace CSV (default: next to --out)")

    m = sub.add_parser("mesh", help="fuse median depth into a TSDF and extract a mesh")
    m.add_argument("--scene", required=True, type=Path)
    m.add_argument("--cameras", required=True, type=Path)
    m.add_argument("--voxel-size", required=True, type=float)
    m.add_argument("--out", required=True, type=Path)
    m.add_argument("--median-threshold", type=_fraction, default=0.5)

    s = sub.add_parser("synth", help="write a synthetic fixture (scene, cameras, targets)")
    s.add_argument("kind", choices=("plane", "sphere"))
    s.add_argument("--out", required=True, type=Path)
    return p


def _echo(args: argparse.Namespace) -> None:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}
    print(json.dumps(cfg, sort_keys=True), flush=True)


def _require(path: Path, what: str) -> None:
    if not path.exists():
        raise FormatError(f"{what} not found: {path}")


def _load_inputs(args, require_images: bool = False):
    _require(args.scene, "scene PLY")
    _require(args.cameras, "camera JSON")
    return sio.load_splat_ply(args.scene), sio.load_cameras_json(args.cameras, require_images=require_images)


def cmd_render(args) -> int:
    scene, cams = _load_inputs(args)
    opts = RenderOptions(median_threshold=args.median_threshold, threads=args.threads)
    out = sio.ensure_dir(args.out)
    for view in cams:
        buf = render(scene.splats, view.camera, opts)
        sio.write_image_png(buf.color, out / f"{view.id}_color.png")
        sio.write_depth_pfm(buf.median_depth, out / f"{view.id}_depth.pfm")
        sio.write_depth_pfm(buf.normal, out / f"{view.id}_normal.pfm")
        sio.write_depth_pfm(buf.accum_opacity, out / f"{view.id}_opacity.pfm")
    print(f"rendered {len(cams)} view(s) to {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    scene, cams = _load_inputs(args)
    if len(cams) == 0:
        raise FormatError(f"{args.cameras}: no cameras")
    rep = validate_scene(scene.splats, cams.cameras, args.trials, args.seed, args.inject_fault,
                         gradients=not args.skip_gradients)
    for m in rep.metrics:
        print(m.line(), flush=True)
    if not rep.passed:
        raise ValidationFailed("failing metrics: " + ", ".join(rep.failing()))
    return EXIT_OK


def _fixture(targets: Path) -> dict:
    path = targets / "fixture.json"
    return json.loads(path.read_text()) if path.exists() else {}


def cmd_fit(args) -> int:
    _require(args.targets / "cameras.json", "camera JSON")
    cams = sio.load_cameras_json(args.targets / "cameras.json")
    fixture = _fixture(args.targets)
    views = []
    for v in cams:
        depth = sio.read_pfm(v.depth).astype(np.float64) if v.depth is not None and v.depth.exists() else None
        views.append((v.split, TargetView(v.camera, sio.read_image_png(v.image), depth)))
    train = [tv for split, tv in views if split == "train"]
    test = [tv for split, tv in views if split == "test"]
    if not train:
        raise FormatError(f"{args.targets}: no training views")

    rng = np.random.default_rng(args.seed)
    if args.init == "file":
        if args.init_scene is None:
            raise FormatError("--init file needs --init-scene")
        _require(args.init_scene, "initial scene PLY")
        initial = sio.load_splat_ply(args.init_scene).splats
    else:
        if "bounds" not in fixture:
            raise FormatError(f"{args.targets}/fixture.json must give 'bounds' for --init {args.init}")
        n = args.splats or int(fixture.get("splats", 16))
        initial = init_scene(args.init, n, fixture["bounds"], rng)

    schedule = FitSchedule(args.iters_phase1, args.iters_phase2)
    opts = RenderOptions(threads=args.threads)
    result = fit(initial, train, LossWeights(args.w_d, args.w_n), schedule, opts)
    sio.save_splat_ply(result.scene, args.out)
    trace = args.trace or args.out.with_suffix(".csv")
    result.write_trace(trace)
    print(f"wrote {args.out} and {trace}")

    eval_views = test or train
    l1 = float(np.mean([held_out_l1(result.scene, tv.camera, tv.image, opts) for tv in eval_views]))
    line = {"eval_split": "test" if test else "train", "l1": l1}
    depths = [depth_error(result.scene, tv.camera, tv.depth, opts) for tv in eval_views if tv.depth is not None]
    if depths:
        line["depth_mae"] = float(np.mean(depths))
    threshold = fixture.get("l1_threshold")
    if threshold is not None:
        line["l1_threshold"] = threshold
    print(json.dumps(line, sort_keys=True))
    if threshold is not None and not l1 < threshold:
        raise ValidationFailed(f"l1 {l1:.4g} not below fixture threshold {threshold}")
    return EXIT_OK


def cmd_mesh(args) -> int:
    scene, cams = _load_inputs(args)
    if args.voxel_size <= 0:
        raise FormatError("--voxel-size must be positive")
    opts = RenderOptions(median_threshold=args.median_threshold, threads=args.threads)
    vol = fuse_views(scene.splats, cams.cameras, args.voxel_size, opts)
    mesh = extract_mesh(vol)
    sio.write_mesh(mesh, args.out)
    print(f"vertices={len(mesh.vertices)} triangles={len(mesh.triangles)} voxel_size={vol.voxel_size:g} dims={list(vol.dims)}")
    if len(mesh) == 0:
        print("warning: extracted mesh is empty", file=sys.stderr)
    return EXIT_OK


def _write_views(out: Path, cams, images, depths, splits) -> None:
    entries = []
    for k, cam in enumerate(cams):
        sio.write_image_png(images[k], out / f"view_{k:02d}.png")
        depth_name = None
        if depths is not None:
            depth_name = f"view_{k:02d}_depth.pfm"
            sio.write_depth_pfm(depths[k], out / depth_name)
        entries.append(sio.camera_to_dict(f"view_{k:02d}", cam, f"view_{k:02d}.png", depth_name, splits[k]))
    sio.save_cameras_json(entries, out / "cameras.json")


def cmd_synth(args) -> int:
    out = sio.ensure_dir(args.out)
    opts = RenderOptions(threads=args.threads)
    if args.kind == "plane":
        scene = plane_generator(rng=np.random.default_rng(args.seed + 7))
        cams = plane_cameras(5)
        images = [render(scene, c, opts).color for c in cams]
        depths = [plane_depth(c) for c in cams]
        _write_views(out, cams, images, depths, ["train"] * 4 + ["test"])
        fixture = {"bounds": [[-0.5, -0.5, -0.05], [0.5, 0.5, 0.05]], "splats": 16, "l1_threshold": 0.02}
        (out / "fixture.json").write_text(json.dumps(fixture, indent=2) + "\n")
    else:
        scene = sphere_scene(rng=np.random.default_rng(args.seed))
        cams = orbit_cameras(20)
        images = [render(scene, c, opts).color for c in cams]
        _write_views(out, cams, images, None, ["train"] * len(cams))
    sio.save_splat_ply(scene, out / "scene.ply")
    print(f"wrote {args.kind} fixture to {out}")
    return EXIT_OK


COMMANDS = {"render": cmd_render, "validate": cmd_validate, "fit": cmd_fit, "mesh": cmd_mesh, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _echo(args)
    try:
        return COMMANDS[args.command](args)
    except ValidationFailed as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FormatError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FitDivergedError as exc:
        print(f"error: {exc} (iteration {exc.iteration})", file=sys.stderr)
        return EXIT_RUNTIME
    except (SplatError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
