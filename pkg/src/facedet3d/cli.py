"""Command-line entry point: ``facedet3d <subcommand> --flag value ...``.

Exit codes: 0 success, 1 invalid input (bad flag, missing file, schema or
checkpoint mismatch), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import configure_threads

logger = logging.getLogger("facedet3d")


class UsageError(Exception):
    """Validation failure; the message names the offending flag."""


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(message)


def _existing(flag, path, kind="file"):
    if path is None:
        return None
    p = Path(path)
    ok = p.is_file() if kind == "file" else p.is_dir()
    if not ok:
        raise UsageError(f"{flag}: {kind} not found: {path}")
    return p


def _json_flag(flag, path):
    from .io import read_json

    try:
        return read_json(_existing(flag, path))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{flag}: invalid JSON ({exc})") from exc


def _require_keys(flag, obj, keys):
    missing = [k for k in keys if k not in obj]
    if missing:
        raise UsageError(f"{flag}: missing keys {missing}")


def _parse(flag, fn, *args):
    """Run a constructor on flag-provided data, reporting bad values against the flag."""
    try:
        return fn(*args)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{flag}: {exc}") from exc


# ---------------------------------------------------------------- subcommands

def cmd_synth_data(args):
    from .synthdata import make_dataset

    if args.n_ids < 1 or args.n_expr < 1:
        raise UsageError("--n-ids and --n-expr must be >= 1")
    if not 0 <= args.n_heldout < args.n_ids:
        raise UsageError("--n-heldout must be in [0, n-ids)")
    manifest = make_dataset(args.n_ids, args.n_expr, args.seed, args.out, n_heldout=args.n_heldout)
    print(f"wrote {len(manifest['samples'])} samples to {args.out}")


def _train_config(args, stage):
    from .facegeom import ParameterError
    from .trainer import TrainConfig

    cfg = _json_flag("--config", args.config) if args.config else {}
    cfg = dict(cfg, stage=stage)
    for key in ("steps", "batch_size", "seed", "lr_generator", "lr_critic", "checkpoint_interval",
                "fine_fallback"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if args.weights:
        try:
            cfg["weights"] = dict(cfg.get("weights", {}), **json.loads(args.weights))
        except (json.JSONDecodeError, TypeError) as exc:
            raise UsageError(f"--weights: expected a JSON object ({exc})") from exc
    cfg["dataset"] = str(_existing("--data", args.data, "dir"))
    try:
        return TrainConfig.from_dict(cfg)
    except (ParameterError, TypeError) as exc:
        raise UsageError(f"--config: {exc}") from exc


def _make_train(stage):
    def run(args):
        from .io import write_json
        from .trainer import TRAINERS

        config = _train_config(args, stage)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.json", config.to_dict())
        result = TRAINERS[stage](config, out_dir=out)
        if result.summary:
            write_json(out / "summary.json", result.summary)
        print(f"checkpoint: {result.checkpoint}")
    return run


def _expression(flag, obj, key):
    from .detailnet import ExpressionTarget

    _require_keys(flag, obj, [key])
    _require_keys(f"{flag} [{key}]", obj[key], ["au", "expr_params"])
    return _parse(flag, ExpressionTarget.from_dict, obj[key])


def cmd_predict(args):
    from .detailnet import SubjectFeatures, detp_forward
    from .facegeom import load_detail_map, save_detail_map
    from .trainer import load_detp

    model, manifest = load_detp(_existing("--checkpoint", args.checkpoint))
    d_in = load_detail_map(_existing("--detail", args.detail))
    target = _json_flag("--target", args.target)
    src = _expression("--target", target, "src")
    tgt = _expression("--target", target, "tgt")
    _require_keys("--target", target, ["face_embedding", "age_embedding"])
    cfg = manifest["config"]["model"]
    if d_in.shape != (cfg["detail_res"], cfg["detail_res"]):
        raise UsageError(f"--detail: expected {cfg['detail_res']}x{cfg['detail_res']}, got {d_in.shape}")
    subj = _parse("--target", SubjectFeatures, target["face_embedding"], target["age_embedding"])
    out = detp_forward(model, d_in, src, tgt, subj)
    save_detail_map(args.out, out.detail_map())
    print(f"wrote {args.out}")


def _scene(flag, scene):
    from .facegeom import Camera
    from .shading import LightCoeffs

    _require_keys(flag, scene, ["camera", "light", "albedo_params", "au", "shape_params", "expr_params"])
    return _parse(flag, Camera.from_dict, scene["camera"]), _parse(flag, LightCoeffs, scene["light"])


def cmd_render(args):
    from .facegeom import load_detail_map
    from .io import read_png, write_png
    from .rendernet import RenderInputs, render, scene_rasters
    from .synthdata import get_universe, smooth_albedo
    from .trainer import load_renderer

    model, _, _ = load_renderer(_existing("--checkpoint", args.checkpoint))
    texture = read_png(_existing("--texture", args.texture))
    details = load_detail_map(_existing("--detail", args.detail))
    scene = _json_flag("--scene", args.scene)
    camera, light = _scene("--scene", scene)
    inputs = _parse("--scene", RenderInputs, texture, details, scene["shape_params"], scene["expr_params"],
                    scene["au"], camera, light, scene["albedo_params"])
    out = render(model, inputs)
    (_, _, _), (_, shade, _) = scene_rasters(inputs, get_universe().model, smooth_albedo)
    dest = Path(args.out_dir)
    dest.mkdir(parents=True, exist_ok=True)
    write_png(dest / "image.png", out.image.numpy())
    write_png(dest / "image_lr.png", out.image_lr.numpy())
    # the detail branch is signed; stored around mid-grey
    write_png(dest / "image_detail.png", 0.5 + out.image_detail.numpy())
    write_png(dest / "shading.png", shading_preview(shade))
    print(f"wrote renders to {dest}")


def shading_preview(shade):
    """Shading scaled so its covered maximum maps to white."""
    peak = float(shade.data.max()) if shade.mask.any() else 1.0
    return shade.data / max(peak, 1e-12)


def cmd_augment_wrinkles(args):
    from .facegeom import Camera, apply_detail_displacement, build_face_mesh, load_detail_map, rasterize_uv
    from .io import read_png, write_png
    from .shading import LightCoeffs, augment_wrinkles, shading_map
    from .synthdata import get_universe

    image = read_png(_existing("--image", args.image))
    detail = load_detail_map(_existing("--detail", args.detail))
    detail_star = load_detail_map(_existing("--detail-star", args.detail_star))
    light_obj = _json_flag("--light", args.light)
    coeffs = light_obj.get("light", light_obj) if isinstance(light_obj, dict) else light_obj
    light = _parse("--light", LightCoeffs, coeffs)
    cam_obj = _json_flag("--camera", args.camera)
    camera = _parse("--camera", Camera.from_dict, cam_obj.get("camera", cam_obj))
    if (camera.height, camera.width) != image.shape[1:]:
        raise UsageError(f"--camera: image size {image.shape[1:]} does not match camera "
                         f"{(camera.height, camera.width)}")
    model = get_universe().model
    geom = _json_flag("--geometry", args.geometry) if args.geometry else {}
    shape = geom.get("shape_params", np.zeros(model.shape_basis.shape[2]))
    expr = geom.get("expr_params", np.zeros(model.expr_basis.shape[2]))
    mesh = _parse("--geometry", build_face_mesh, shape, expr, model)
    s = shading_map(rasterize_uv(apply_detail_displacement(mesh, detail), camera), light)
    s_star = shading_map(rasterize_uv(apply_detail_displacement(mesh, detail_star), camera), light)
    write_png(args.out, augment_wrinkles(image, s, s_star))
    print(f"wrote {args.out}")


def cmd_eval(args):
    from .evaluate import evaluate
    from .io import write_json

    data = _existing("--data", args.data, "dir")
    paths = {name: _existing(f"--{name.replace('_', '-')}", getattr(args, name))
             for name in ("detp", "render", "render_ablated", "sr")}
    report = evaluate(dataset=data, seed=args.seed, **paths)
    write_json(args.out, report)
    for key, entry in report.items():
        status = {True: "pass", False: "FAIL", None: "skipped"}[entry["pass"]]
        print(f"{key}: {status}")


def cmd_report(args):
    from .io import write_png
    from .report import report_grid
    from .synthdata import load_dataset
    from .trainer import load_detp, load_renderer

    samples, synth = load_dataset(_existing("--data", args.data, "dir"))
    detp, _ = load_detp(_existing("--detp", args.detp))
    renderer, _, _ = load_renderer(_existing("--render", args.render))
    if not 0 <= args.sample < len(samples):
        raise UsageError(f"--sample: index out of range (dataset has {len(samples)} samples)")
    grid = report_grid(samples, args.sample, detp, renderer, synth, n_targets=args.n_targets, seed=args.seed)
    write_png(args.out, grid)
    print(f"wrote {args.out}")


# ---------------------------------------------------------------- parser

def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset directory written by synth-data")
    p.add_argument("--out", required=True, help="output directory (checkpoint.zip, metrics.csv)")
    p.add_argument("--config", help="TrainConfig JSON; explicit flags override it")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr-generator", type=float, dest="lr_generator")
    p.add_argument("--lr-critic", type=float, dest="lr_critic")
    p.add_argument("--weights", help='JSON object of loss weights, e.g. \'{"augw": 0}\'')
    p.add_argument("--checkpoint-interval", type=int, dest="checkpoint_interval")


def build_parser():
    parser = _Parser(prog="facedet3d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    p.add_argument("--n-ids", type=int, required=True, dest="n_ids")
    p.add_argument("--n-expr", type=int, required=True, dest="n_expr")
    p.add_argument("--n-heldout", type=int, default=0, dest="n_heldout")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-detp", help="train the detail predictor and its critics")
    _add_train_flags(p)
    p.add_argument("--fine-fallback", choices=("input", "zero"), dest="fine_fallback")
    p.set_defaults(func=_make_train("detp"))

    p = sub.add_parser("train-render", help="train the neural renderer")
    _add_train_flags(p)
    p.set_defaults(func=_make_train("render"))

    p = sub.add_parser("train-sr", help="train the 4x detail super-resolution net")
    _add_train_flags(p)
    p.set_defaults(func=_make_train("sr"))

    p = sub.add_parser("predict", help="predict a detail map for a target expression")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--detail", required=True, help="input detail map (PFM)")
    p.add_argument("--target", required=True,
                   help="JSON with src/tgt {au, expr_params}, face_embedding, age_embedding")
    p.add_argument("--out", required=True, help="output PFM")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("render", help="render a scene with a trained renderer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--texture", required=True, help="UV texture PNG")
    p.add_argument("--detail", required=True, help="detail map PFM")
    p.add_argument("--scene", required=True,
                   help="JSON with camera, light, albedo_params, au, shape_params, expr_params")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("augment-wrinkles", help="transplant wrinkles between detail maps by re-shading")
    p.add_argument("--image", required=True)
    p.add_argument("--detail", required=True, help="detail map the image was rendered with")
    p.add_argument("--detail-star", required=True, dest="detail_star", help="donor detail map")
    p.add_argument("--light", required=True, help="JSON list of 9 SH coefficients (or {light: [...]})")
    p.add_argument("--camera", required=True, help="camera JSON (or {camera: {...}})")
    p.add_argument("--geometry", help="JSON with shape_params/expr_params; mean face if omitted")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment_wrinkles)

    p = sub.add_parser("eval", help="compute all acceptance metrics as JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--detp")
    p.add_argument("--render")
    p.add_argument("--render-ablated", dest="render_ablated")
    p.add_argument("--sr")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="write an image grid of reconstructions and expression edits")
    p.add_argument("--data", required=True)
    p.add_argument("--detp", required=True)
    p.add_argument("--render", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--n-targets", type=int, default=3, dest="n_targets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None):
    """Parse and execute; returns the process exit code."""
    from .facegeom import ParameterError
    from .io import FormatError

    configure_threads()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ParameterError, FormatError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        logger.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())
