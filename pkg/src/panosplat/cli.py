"""Command-line pipeline driver.

Commands: lift, optimize, render, detect, eval, sample, gradcheck, demo.
Exit codes: 0 success, 1 usage error, 2 data error, 3 failed check.

Configuration precedence: command-line flags beat ``--config`` file entries
(``key=value`` lines, ``#`` comments), which beat built-in defaults.  The
effective configuration is echoed into every output: a ``cli_meta`` entry in
archives, a header line in text files.
"""

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .cubemap_render import RenderConfig, render_cubemap, save_cubemap, semantic_loss_grad
from .detect import (
    Box3D,
    decode_boxes,
    filter_foreground,
    head_forward,
    load_detections,
    nms_rotated,
    save_detections,
)
from .eval3d import map_report
from .gaussian_core import GaussianSet, LiftParams, lift, load_gaussians, save_gaussians, stub_features
from .gaussian_opt import OptimizeParams, optimize
from .nn_kernels import finite_diff_grad, load_weight_set, pipeline_weights, save_weight_set
from .pano_geometry import ErpGrid, unproject_depth_map
from .sampling import chamfer, fps, save_ply, voxel_downsample
from .synth import SynthParams, generate_scene
from .tensorio import load_annotations, read_tensor, save_annotations, write_tensor

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3

# argmax face colors, one per category id; the last entry is background
PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (67, 99, 216),
    (245, 130, 49), (145, 30, 180), (66, 212, 244), (240, 50, 230),
    (191, 239, 69), (154, 99, 36), (128, 128, 0), (40, 40, 40),
)

DEFAULTS = {
    "lift": {"stride": 4, "r_max": 0.5, "num_categories": 12, "feature_dim": 32},
    "optimize": {
        "submodules": 2,
        "voxel_size": 0.05,
        "max_center_step": 0.2,
        "scale_offset_range": 0.4,
        "rot_offset_range": math.pi / 4,
    },
    "render": {
        "resolution": 256,
        "near_plane": 0.01,
        "eig_floor": 0.3,
        "cutoff_sigma": 3.0,
        "weight_clamp": 0.999,
        "prob_eps": 1e-6,
    },
    "detect": {"foreground": "auto", "nms_iou": 0.25, "max_keep": 100},
    "eval": {"num_categories": 12},
    "sample": {
        "stride": 1,
        "start_index": 0,
        "fps_counts": "1024,4096",
        "voxel_sizes": "0.05,0.1",
    },
    "gradcheck": {"eps": 1e-4, "tolerance": 1e-3},
    "demo": {"seed": 0, "height": 64, "width": 128, "num_categories": 12, "feature_dim": 32},
}


class UsageError(Exception):
    pass


class CheckFailure(Exception):
    pass


class CliDataError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------ configuration


def _parse_config_file(path):
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliDataError(f"cannot read config file: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise CliDataError(f"{path} line {lineno}: expected key=value, got {body!r}")
        key, _, value = body.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce(value: str, template):
    try:
        if isinstance(template, bool):
            raise TypeError("no boolean config keys")
        if isinstance(template, int):
            return int(value)
        if isinstance(template, float):
            return float(value)
        return value
    except ValueError as exc:
        raise CliDataError(f"bad config value {value!r}: {exc}") from exc


def effective_config(command: str, args) -> dict:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        for key, value in _parse_config_file(args.config).items():
            if key not in cfg:
                raise CliDataError(f"unknown config key {key!r} for command {command!r}")
            cfg[key] = _coerce(value, cfg[key])
    for key in cfg:
        given = getattr(args, key, None)
        if given is not None:
            cfg[key] = given
    threads = getattr(args, "threads", None)
    if threads is not None and threads < 1:
        raise CliDataError(f"--threads must be >= 1, got {threads}")
    cfg["threads"] = threads or 1  # worker cap; kernels are sequential anyway
    return cfg


def _meta_json(command: str, cfg: dict) -> str:
    return json.dumps({"command": command, "config": cfg}, sort_keys=True)


def _meta_entry(command: str, cfg: dict) -> np.ndarray:
    return np.frombuffer(_meta_json(command, cfg).encode("utf-8"), dtype=np.uint8).copy()


def _meta_lines(command: str, cfg: dict) -> list:
    return [_meta_json(command, cfg)]


def _int_list(text: str, what: str):
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise CliDataError(f"bad {what} list {text!r}: {exc}") from exc


def _float_list(text: str, what: str):
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise CliDataError(f"bad {what} list {text!r}: {exc}") from exc


# ----------------------------------------------------------------- commands


def cmd_demo(args) -> int:
    cfg = effective_config("demo", args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = generate_scene(
        SynthParams(
            seed=cfg["seed"],
            height=cfg["height"],
            width=cfg["width"],
            num_categories=cfg["num_categories"],
        )
    )
    write_tensor(out / "depth.ktsr", scene.depth.astype(np.float32))
    write_tensor(out / "mask.ktsr", scene.mask)
    save_annotations(out / "boxes.txt", scene.boxes, header_lines=_meta_lines("demo", cfg))
    weights = pipeline_weights(
        feature_dim=cfg["feature_dim"],
        num_categories=cfg["num_categories"],
        init="random",
        seed=cfg["seed"],
    )
    save_weight_set(out / "weights.ktar", weights)
    manifest = {
        "command": "demo",
        "config": cfg,
        "room_lo": scene.room_lo.tolist(),
        "room_hi": scene.room_hi.tolist(),
        "num_objects": len(scene.boxes),
        "files": ["depth.ktsr", "mask.ktsr", "boxes.txt", "weights.ktar"],
    }
    (out / "demo.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(f"demo scene in {out}: {cfg['height']}x{cfg['width']} depth, "
          f"{len(scene.boxes)} objects")
    return EXIT_OK


def cmd_lift(args) -> int:
    cfg = effective_config("lift", args)
    depth = read_tensor(args.depth).astype(np.float64)
    if depth.ndim != 2:
        raise CliDataError(f"depth must be 2D, got shape {depth.shape}")
    if args.features:
        features = read_tensor(args.features).astype(np.float64)
        if features.ndim != 3:
            raise CliDataError(f"features must be [H, W, F], got {features.shape}")
        cfg["feature_dim"] = features.shape[2]
    else:
        features = stub_features(depth, cfg["feature_dim"])
    weights = load_weight_set(args.weights)
    params = LiftParams(
        r_max=cfg["r_max"],
        stride=cfg["stride"],
        num_categories=cfg["num_categories"],
        feature_dim=cfg["feature_dim"],
    )
    gs = lift(depth, features, weights, params)
    save_gaussians(args.out, gs, extra_entries={"cli_meta": _meta_entry("lift", cfg)})
    print(f"lifted {len(gs)} gaussians -> {args.out}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    cfg = effective_config("optimize", args)
    gs = load_gaussians(args.gaussians)
    weights = load_weight_set(args.weights)
    params = OptimizeParams(
        num_submodules=cfg["submodules"],
        voxel_size=cfg["voxel_size"],
        max_center_step=cfg["max_center_step"],
        scale_offset_range=cfg["scale_offset_range"],
        rot_offset_range=cfg["rot_offset_range"],
    )
    refined = optimize(gs, weights, params)
    save_gaussians(args.out, refined, extra_entries={"cli_meta": _meta_entry("optimize", cfg)})
    print(f"refined {len(refined)} gaussians through {cfg['submodules']} sub-modules "
          f"-> {args.out}")
    return EXIT_OK


def _write_face_pngs(cubemap, out_dir):
    from PIL import Image

    from .pano_geometry import FACE_ORDER

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cubemap.num_categories > len(PALETTE):
        raise CliDataError(
            f"palette has {len(PALETTE)} colors, cubemap has {cubemap.num_categories} classes"
        )
    flat = [c for rgb in PALETTE for c in rgb] + [0] * (768 - 3 * len(PALETTE))
    for fi, face in enumerate(FACE_ORDER):
        idx = np.argmax(cubemap.probs[fi], axis=2).astype(np.uint8)
        img = Image.fromarray(idx, mode="P")
        img.putpalette(flat)
        img.save(out / f"{face}.png")


def cmd_render(args) -> int:
    cfg = effective_config("render", args)
    gs = load_gaussians(args.gaussians)
    config = RenderConfig(
        resolution=cfg["resolution"],
        near_plane=cfg["near_plane"],
        eig_floor=cfg["eig_floor"],
        cutoff_sigma=cfg["cutoff_sigma"],
        weight_clamp=cfg["weight_clamp"],
        prob_eps=cfg["prob_eps"],
    )
    cubemap = render_cubemap(gs, config)
    save_cubemap(args.out, cubemap, extra_entries={"cli_meta": _meta_entry("render", cfg)})
    if args.png_dir:
        _write_face_pngs(cubemap, args.png_dir)
    print(f"rendered 6 faces at {config.resolution}px, K={cubemap.num_categories} "
          f"-> {args.out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = effective_config("detect", args)
    gs = load_gaussians(args.gaussians)
    weights = load_weight_set(args.weights)
    if cfg["foreground"] == "auto":
        foreground = list(range(gs.num_categories - 1))  # all but background
    else:
        foreground = _int_list(cfg["foreground"], "foreground id")
    fg = filter_foreground(gs, foreground)
    boxes = decode_boxes(fg, head_forward(fg, weights))
    kept = nms_rotated(boxes, iou_threshold=cfg["nms_iou"], max_keep=cfg["max_keep"])
    save_detections(
        args.out,
        kept,
        header_lines=_meta_lines("detect", cfg)
        + [f"{len(kept)} detections from {len(fg)} foreground of {len(gs)} gaussians"],
    )
    print(f"kept {len(kept)} of {len(boxes)} proposals -> {args.out}")
    return EXIT_OK


def _load_pred_boxes(path, num_categories):
    """Detections, or a plain annotation file treated as confidence-1 boxes."""
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        body = line.strip()
        if not body or body.startswith("#"):
            continue
        if len(body.split()) == 8:
            return [
                Box3D(b.category_id, b.center, b.size, b.yaw, 1.0)
                for b in load_annotations(path, num_categories)
            ]
        break
    return load_detections(path, num_categories)


def cmd_eval(args) -> int:
    cfg = effective_config("eval", args)
    preds = _load_pred_boxes(args.pred, cfg["num_categories"])
    gts = load_annotations(args.gt, cfg["num_categories"])
    report = map_report(preds, gts)
    print(report.table())
    for thr in sorted(report.map_at):
        print(f"mAP@{round(thr * 100)} = {report.map_at[thr]}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = effective_config("sample", args)
    depth = read_tensor(args.depth).astype(np.float64)
    points, _ = unproject_depth_map(depth, cfg["stride"])
    out_dir = Path(args.ply_dir) if args.ply_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_ply(out_dir / "original.ply", points)
    print(f"points: {len(points)}")
    for k in _int_list(cfg["fps_counts"], "fps count"):
        if k > len(points):
            print(f"fps {k}: skipped (only {len(points)} points)")
            continue
        sub = points[fps(points, k, cfg["start_index"])]
        print(f"fps {k}: chamfer = {chamfer(points, sub):.6f}")
        if out_dir:
            save_ply(out_dir / f"fps_{k}.ply", sub)
    for size in _float_list(cfg["voxel_sizes"], "voxel size"):
        sub = voxel_downsample(points, size)
        print(f"voxel {size:g}: points = {len(sub)}, chamfer = {chamfer(points, sub):.6f}")
        if out_dir:
            save_ply(out_dir / f"voxel_{size:g}.ply", sub)
    return EXIT_OK


def _bundled_scene():
    """Fixed margin-checked 5-Gaussian scene for the gradient check.

    The construction keeps every splat clear of the renderer's
    discontinuities (near plane, eigenvalue floor, cutoff boundary, weight
    and probability clamps, depth-sort ties), so central differences at
    eps = 1e-4 see a smooth loss.
    """
    from .cubemap_render import faces_to_onehot

    n, k, res = 5, 4, 12
    rng = np.random.default_rng(0)
    direc = rng.normal(size=(n, 3))
    direc /= np.linalg.norm(direc, axis=1, keepdims=True)
    centers = direc * rng.uniform(1.5, 2.5, size=(n, 1))
    cat = rng.uniform(0.2, 1.0, size=(n, k))
    cat /= cat.sum(axis=1, keepdims=True)
    gs = GaussianSet(
        centers=centers,
        radii=rng.uniform(0.2, 0.45, size=(n, 3)),
        euler=rng.uniform(-np.pi, np.pi, size=(n, 3)),
        opacity=rng.uniform(0.3, 0.85, size=n),
        category=cat,
        features=np.zeros((n, 4)),
        grid=ErpGrid(16, 32),
        stride=4,
        r_max=0.5,
    )
    labels = rng.integers(0, k, size=(6, res, res))
    return gs, faces_to_onehot(labels, k), RenderConfig(resolution=res)


def cmd_gradcheck(args) -> int:
    import dataclasses

    cfg = effective_config("gradcheck", args)
    gs, target, config = _bundled_scene()
    grads = semantic_loss_grad(gs, target, config)
    analytic = np.concatenate(
        [grads.centers.ravel(), grads.radii.ravel(), grads.euler.ravel(), grads.opacity]
    )
    n = len(gs)
    p0 = np.concatenate(
        [gs.centers.ravel(), gs.radii.ravel(), gs.euler.ravel(), gs.opacity]
    )

    def loss_at(p):
        probe = dataclasses.replace(
            gs,
            centers=p[: 3 * n].reshape(n, 3),
            radii=p[3 * n : 6 * n].reshape(n, 3),
            euler=p[6 * n : 9 * n].reshape(n, 3),
            opacity=p[9 * n :].copy(),
        )
        return semantic_loss_grad(probe, target, config).loss

    numeric = finite_diff_grad(loss_at, p0, eps=cfg["eps"])
    rel = np.abs(analytic - numeric) / np.maximum(1e-6, np.abs(analytic) + np.abs(numeric))
    worst = float(rel.max())
    print(f"gradcheck over {p0.size} parameters: max rel err = {worst:.3e}")
    if worst >= cfg["tolerance"]:
        raise CheckFailure(f"max rel err {worst:.3e} >= tolerance {cfg['tolerance']:g}")
    print(f"max rel err < {cfg['tolerance']:g}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_config_flags(sub, command):
    for key, value in DEFAULTS[command].items():
        flag = "--" + key.replace("_", "-")
        if isinstance(value, int):
            sub.add_argument(flag, type=int, default=None, help=f"(default: {value})")
        elif isinstance(value, float):
            sub.add_argument(flag, type=float, default=None, help=f"(default: {value:g})")
        else:
            sub.add_argument(flag, type=str, default=None, help=f"(default: {value})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="panosplat",
        description="Panoramic depth -> semantic 3D Gaussians -> cube-map "
        "rendering and 3D box detection.",
    )
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="key=value config file")
    common.add_argument(
        "--threads", type=int, default=None, help="worker cap (default: 1)"
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("demo", parents=[common], help="generate a synthetic scene bundle")
    p.add_argument("out_dir", help="output directory")
    _add_config_flags(p, "demo")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("lift", parents=[common], help="depth map to gaussian set")
    p.add_argument("depth", help="depth tensor (.ktsr)")
    p.add_argument("--features", default=None, help="feature tensor [H, W, F] (.ktsr); "
                   "defaults to the positional-encoding stub")
    p.add_argument("--weights", required=True, help="weight archive (.ktar)")
    p.add_argument("--out", required=True, help="output gaussian archive (.ktar)")
    _add_config_flags(p, "lift")
    p.set_defaults(func=cmd_lift)

    p = sub.add_parser("optimize", parents=[common], help="run refinement sub-modules")
    p.add_argument("gaussians", help="gaussian archive (.ktar)")
    p.add_argument("--weights", required=True, help="weight archive (.ktar)")
    p.add_argument("--out", required=True, help="output gaussian archive (.ktar)")
    _add_config_flags(p, "optimize")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("render", parents=[common], help="splat gaussians to a cube map")
    p.add_argument("gaussians", help="gaussian archive (.ktar)")
    p.add_argument("--out", required=True, help="output cube-map archive (.ktar)")
    p.add_argument("--png-dir", default=None, help="also write argmax face PNGs here")
    _add_config_flags(p, "render")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("detect", parents=[common], help="decode and filter 3D boxes")
    p.add_argument("gaussians", help="gaussian archive (.ktar)")
    p.add_argument("--weights", required=True, help="weight archive (.ktar)")
    p.add_argument("--out", required=True, help="output detections (.txt)")
    _add_config_flags(p, "detect")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", parents=[common], help="mAP report for detections")
    p.add_argument("--pred", required=True, help="detections file (.txt)")
    p.add_argument("--gt", required=True, help="ground-truth annotations (.txt)")
    _add_config_flags(p, "eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", parents=[common], help="FPS/voxel subsampling study")
    p.add_argument("depth", help="depth tensor (.ktsr)")
    p.add_argument("--ply-dir", default=None, help="export point clouds here (.ply)")
    _add_config_flags(p, "sample")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of the renderer gradients")
    _add_config_flags(p, "gradcheck")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
