"""``fgs`` command line: init, fit-points, train, render, evaluate, prune, report.

Exit codes: 0 success, 2 bad arguments or config, 3 data error (missing or
malformed inputs), 4 numerical failure during optimization.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import struct
import sys

import numpy as np

from . import __version__
from .io import load_camera_json, load_scene, read_ply, write_ply, write_png
from .masking import MaskSet, pack_bits
from .model import F3DGSModel
from .optim import NumericalError
from .seeding import chamfer_distance, fit_coordinates_chamfer
from .storage import load_model, save_model, storage_report
from .train import TrainConfig, evaluate, init_model, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --- config and manifests ------------------------------------------------------------


def read_config_file(path) -> dict:
    """Flat ``key = value`` text file; ``#`` starts a comment."""
    values = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{num}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def write_config_file(path, config: TrainConfig):
    with open(path, "w") as fh:
        for key, value in config.to_dict().items():
            if isinstance(value, list):
                value = " ".join(repr(float(v)) for v in value)
            fh.write(f"{key} = {value}\n")


def build_config(args) -> TrainConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    flags = {"N": "N", "d": "d", "scheme": "scheme", "steps": "total_steps", "seed": "seed",
             "init": "init", "num_blocks": "num_blocks", "vm_mode": "vm_mode",
             "interval": "interval", "lam": "lam"}
    for attr, key in flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            values[key] = value
    try:
        return TrainConfig.from_dict(values)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"bad config: {exc}") from exc


def git_blob_hash(data: bytes) -> str:
    """Content hash computed the way git hashes a blob."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(path) -> str:
    """Blob hash for a file; for a directory, hash of its sorted (path, blob hash) list."""
    if os.path.isfile(path):
        with open(path, "rb") as fh:
            return git_blob_hash(fh.read())
    entries = []
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            entries.append(f"{os.path.relpath(full, path)} {content_hash(full)}")
    return git_blob_hash("\n".join(entries).encode())


def make_run_dir(args, command) -> str:
    run_dir = args.run_dir
    if run_dir is None:
        stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
        run_dir = os.path.join("runs", f"{command}-{stamp}")
    os.makedirs(run_dir, exist_ok=True)
    return run_dir


def write_manifest(run_dir, command, argv, inputs, config=None, seed=None, outputs=None):
    doc = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "seed": seed,
        "config": None if config is None else config.to_dict(),
        "inputs": {p: content_hash(p) for p in inputs if p and os.path.exists(p)},
        "outputs": outputs or {},
    }
    with open(os.path.join(run_dir, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2)
    if config is not None:
        write_config_file(os.path.join(run_dir, "config.txt"), config)


def _load_model(path) -> F3DGSModel:
    try:
        return load_model(path)
    except OSError as exc:
        raise DataError(f"cannot read model {path}: {exc}") from exc
    except (ValueError, KeyError, struct.error) as exc:
        raise DataError(f"malformed model file {path}: {exc}") from exc


def _load_scene(path, background):
    try:
        return load_scene(path, background)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load scene {path}: {exc}") from exc


# --- subcommands ----------------------------------------------------------------------------


def cmd_init(args):
    config = build_config(args)
    points, colors = None, None
    ply = args.points or (os.path.join(args.scene, "points.ply") if args.scene else None)
    if ply is not None:
        try:
            data = read_ply(ply)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read point cloud {ply}: {exc}") from exc
        points, colors = data.points, data.colors
    bounds = None
    if args.bounds:
        lo, hi = np.array(args.bounds[:3]), np.array(args.bounds[3:])
        bounds = (lo, hi)
    if points is None and not (config.init == "random" and bounds is not None):
        raise UsageError("init needs --points/--scene (or --init random with --bounds)")
    try:
        model = init_model(points, config, colors=colors, bounds=bounds)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    run_dir = make_run_dir(args, "init")
    out = os.path.join(run_dir, "model.f3gs")
    nbytes = save_model(model, out)
    write_manifest(run_dir, "init", args.argv, [ply], config, config.seed, {"model": out})
    print(f"initialized {len(model.blocks)} blocks ({model.num_gaussians()} Gaussians), "
          f"{nbytes} bytes -> {out}")


def cmd_fit_points(args):
    if (args.points is None) == (args.ply is None):
        raise UsageError("fit-points needs exactly one point cloud (positional or --ply)")
    args.points = args.points or args.ply
    try:
        target = read_ply(args.points).points
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read point cloud {args.points}: {exc}") from exc
    try:
        fit = fit_coordinates_chamfer(target, args.blocks, args.N, args.steps, args.lr, args.seed,
                                      lam=args.lam, interval=args.interval, log_every=args.log_every)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    run_dir = make_run_dir(args, "fit-points")
    pts = fit.points
    write_ply(os.path.join(run_dir, "fitted.ply"), pts)
    model = F3DGSModel([b.astype(np.float32) for b in fit.blocks], None)
    save_model(model, os.path.join(run_dir, "coordinates.f3gs"))
    np.savetxt(os.path.join(run_dir, "losses.csv"), np.array(fit.losses), header="chamfer", comments="")
    rep = storage_report(model)
    summary = {"chamfer": chamfer_distance(pts, target), "points": len(pts),
               "stored_coordinate_scalars": rep["stored_coordinate_scalars"],
               "dense_coordinate_scalars": 3 * len(target)}
    write_manifest(run_dir, "fit-points", args.argv, [args.points], None, args.seed, summary)
    print(json.dumps(summary))


def cmd_train(args):
    config = build_config(args)
    scene = _load_scene(args.scene, config.background)
    if args.model:
        model = _load_model(args.model)
        if model.masks is not None and model.masks.frozen:
            raise DataError("cannot continue training a model with frozen masks")
    else:
        if scene.points is None and config.init == "histogram":
            raise DataError(f"{args.scene} has no points.ply; use --init random or --model")
        pts = None if scene.points is None else scene.points.points
        cols = None if scene.points is None else scene.points.colors
        bounds = None
        if pts is None:
            centers = np.array([c.center for c in scene.train_cameras])
            bounds = (centers.min(axis=0) / 2, centers.max(axis=0) / 2)
        try:
            model = init_model(pts, config, colors=cols, bounds=bounds)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    run_dir = make_run_dir(args, "train")
    write_manifest(run_dir, "train", args.argv, [args.scene, args.model], config, config.seed)

    def show(row):
        if not args.quiet:
            extra = f"  test {row['test_psnr']:.2f} dB" if row["test_psnr"] != "" else ""
            print(f"step {row['step']:6d}  loss {row['loss']:.5f}  psnr {row['train_psnr']:.2f}"
                  f"{extra}  active {row['active_gaussians']}", flush=True)

    train(model, scene, config, run_dir, callback=show)
    result = evaluate(model, scene.test_cameras, scene.test_images, config.background)
    with open(os.path.join(run_dir, "eval.json"), "w") as fh:
        json.dump(result, fh, indent=2)
    write_manifest(run_dir, "train", args.argv, [args.scene, args.model], config, config.seed,
                   {"model": os.path.join(run_dir, "model.f3gs"),
                    "metrics": os.path.join(run_dir, "metrics.csv"), "eval": result})
    print(json.dumps(result))


def cmd_render(args):
    model = _load_model(args.model)
    try:
        cam = load_camera_json(args.camera)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read camera {args.camera}: {exc}") from exc
    if args.width or args.height:
        w = args.width or cam.width
        h = args.height or cam.height
        if w <= 0 or h <= 0:
            raise UsageError("image size must be positive")
        sx, sy = w / cam.width, h / cam.height
        cam = type(cam)(cam.R, cam.t, cam.fx * sx, cam.fy * sy, cam.cx * sx, cam.cy * sy, w, h, cam.near)
    bg = tuple(args.background) if args.background else (0.0, 0.0, 0.0)
    image = model.copy().freeze_masks().render(cam, bg)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_png(args.out, image)
    print(f"wrote {image.shape[1]}x{image.shape[0]} image to {args.out}")


def cmd_evaluate(args):
    model = _load_model(args.model)
    bg = tuple(args.background) if args.background else (0.0, 0.0, 0.0)
    scene = _load_scene(args.scene, bg)
    split = scene.test_cameras if args.split == "test" else scene.train_cameras
    imgs = scene.test_images if args.split == "test" else scene.train_images
    try:
        result = evaluate(model, split, imgs, bg)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    print(json.dumps(result))


def cmd_prune(args):
    """Freeze masks and clear the bits of Gaussians whose opacity is below ``alpha_min``."""
    model = _load_model(args.model).copy()
    if model.decoder is None:
        raise DataError("model has no decoder; nothing to prune against")
    e = model.gaussians(prune=False)
    keep = (e.opacities >= args.alpha_min).astype(np.uint8)
    start = 0
    bits = []
    for n in [b.n for b in model.blocks]:
        count = model.terms * n**3
        bits.append(pack_bits(keep[start:start + count]))
        start += count
    tau = model.masks.tau if model.masks is not None else 0.01
    model.masks = MaskSet(bits=bits, resolutions=[b.n for b in model.blocks], terms=model.terms, tau=tau)
    nbytes = save_model(model, args.out)
    print(json.dumps({"kept": int(keep.sum()), "total": int(len(keep)), "bytes": nbytes}))


def cmd_report(args):
    model = _load_model(args.model)
    rep = storage_report(model)
    if args.json:
        print(json.dumps(rep))
        return
    print(f"blocks                     {rep['blocks']}")
    print(f"stored coordinate scalars  {rep['stored_coordinate_scalars']}")
    print(f"stored scalars             {rep['stored_scalars']} "
          f"(factors {rep['factor_scalars']}, decoder {rep['decoder_scalars']})")
    print(f"mask bits                  {rep['mask_bits']}")
    print(f"representable Gaussians    {rep['representable_gaussians']}")
    print(f"compression ratio          {rep['compression_ratio']:.6g}")
    print(f"bytes on disk              {rep['bytes_on_disk']}")


def cmd_make_toy(args):
    from .toy import make_toy_scene, write_scene
    scene, _ = make_toy_scene(n=args.gaussians, n_train=args.train_views, n_test=args.test_views,
                              size=args.size, seed=args.seed)
    write_scene(scene, args.out)
    print(f"wrote toy scene to {args.out}")


# --- parser -------------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_config_flags(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("-N", type=int, help="block resolution")
    p.add_argument("-d", type=int, help="feature width")
    p.add_argument("--scheme", choices=["CP", "VM"])
    p.add_argument("--vm-mode", dest="vm_mode", choices=["per-term", "shared"])
    p.add_argument("--steps", type=int, help="total training steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--init", choices=["histogram", "random"])
    p.add_argument("--num-blocks", dest="num_blocks", type=int)
    p.add_argument("--interval", type=float, help="histogram bin width")
    p.add_argument("--lambda", dest="lam", type=int, help="minimum points for a seeded bin")
    p.add_argument("--run-dir", dest="run_dir")


def build_parser():
    parser = _Parser(prog="fgs", description="Factorized Gaussian splatting on the CPU.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("init", help="seed a model from a point cloud")
    p.add_argument("--points", "--ply", dest="points")
    p.add_argument("--scene")
    p.add_argument("--bounds", type=float, nargs=6, metavar=("X0", "Y0", "Z0", "X1", "Y1", "Z1"))
    _add_config_flags(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("fit-points", help="fit coordinate blocks to a point cloud (Chamfer)")
    p.add_argument("points", nargs="?")
    p.add_argument("--ply", help="same as the positional point cloud")
    p.add_argument("--blocks", type=int, default=30)
    p.add_argument("--interval", type=float, help="fixed histogram bin width for seeding")
    p.add_argument("--lambda", dest="lam", type=int, default=5)
    p.add_argument("-N", type=int, default=3)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", dest="log_every", type=int, default=0)
    p.add_argument("--run-dir", dest="run_dir")
    p.set_defaults(func=cmd_fit_points)

    p = sub.add_parser("train", help="train on a scene folder")
    p.add_argument("--scene", required=True)
    p.add_argument("--model", help="start from this model instead of seeding")
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one view to PNG")
    p.add_argument("model")
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--background", type=float, nargs=3)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("evaluate", help="PSNR/SSIM/timing on a scene split")
    p.add_argument("model")
    p.add_argument("--scene", required=True)
    p.add_argument("--split", choices=["test", "train"], default="test")
    p.add_argument("--background", type=float, nargs=3)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("prune", help="freeze masks, dropping near-transparent Gaussians")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha-min", dest="alpha_min", type=float, default=0.001)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("report", help="storage accounting of a model file")
    p.add_argument("model")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("make-toy", help="write a synthetic scene folder")
    p.add_argument("--out", required=True)
    p.add_argument("--gaussians", type=int, default=200)
    p.add_argument("--train-views", dest="train_views", type=int, default=20)
    p.add_argument("--test-views", dest="test_views", type=int, default=5)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        args.argv = argv
        args.func(args)
    except UsageError as exc:
        print(f"fgs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"fgs: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"fgs: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
