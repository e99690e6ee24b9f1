"""Command line: synth | train | animate | eval | gradcheck | render | serve.

Every subcommand accepts --config <path> (a JSON object whose keys are flag
names with underscores); explicit flags override config values. Exit codes:
0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .body import PoseParams, body_transforms, pose_body
from .data import load_gt_meshes, load_scene, save_dataset
from .evaluate import animate, evaluate, write_metrics_csv
from .garment import pose_garment_t
from .geometry import MeshSequence, load_obj, save_obj
from .loss import LossWeights, total_loss_t
from .network import NetConfig, init_params, net_from_checkpoint, predict_displacement
from .numerics import gradcheck
from .render import DEFAULT_SHARPNESS, rasterize_normals, rasterize_silhouette, save_png
from .synth import SynthConfig, default_scene, synth_sequence
from .train import WEIGHTS_PARAM, TrainConfig, train

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _add_common(p):
    p.add_argument("--config", help="JSON file with default flag values")
    p.add_argument("--seed", type=int, default=0)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="drape", description="pose-driven garment reconstruction")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    registry = {}

    p = registry["synth"] = sub.add_parser(
        "synth", help="generate a synthetic supervised sequence")
    _add_common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--pose-amplitude", type=float, default=0.4)
    p.add_argument("--wrinkle-amplitude", type=float, default=0.01)
    p.add_argument("--wrinkle-freq", type=float, default=3.0)
    p.add_argument("--phase-gain", type=float, default=0.8)
    p.add_argument("--camera-scale", type=float, default=2.5)
    p.add_argument("--sharpness", type=float, default=DEFAULT_SHARPNESS)
    p.set_defaults(func=_cmd_synth)

    p = registry["train"] = sub.add_parser(
        "train", help="fit the deformation network to a sequence")
    _add_common(p)
    p.add_argument("--data", required=True, help="sequence directory")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--no-blend-weights", action="store_true",
                   help="freeze garment blend weights")
    p.add_argument("--sharpness", type=float, default=DEFAULT_SHARPNESS)
    p.add_argument("--hypotheses", type=int, default=3)
    p.add_argument("--init-std", type=float, default=0.05)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--w-mask", type=float, default=500.0)
    p.add_argument("--w-normal", type=float, default=1500.0)
    p.add_argument("--w-edge", type=float, default=100.0)
    p.add_argument("--w-face", type=float, default=2000.0)
    p.add_argument("--w-angle", type=float, default=1.0)
    p.add_argument("--w-collision", type=float, default=100.0)
    p.add_argument("--epsilon", type=float, default=0.004)
    p.set_defaults(func=_cmd_train)

    p = registry["animate"] = sub.add_parser(
        "animate", help="pose a trained garment and write OBJ frames")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.set_defaults(func=_cmd_animate)

    p = registry["eval"] = sub.add_parser(
        "eval", help="chamfer + temporal consistency between OBJ sequences")
    _add_common(p)
    p.add_argument("--pred", required=True, help="directory of predicted .obj")
    p.add_argument("--gt", required=True, help="directory of ground-truth .obj")
    p.add_argument("--out", help="metrics CSV path (default: stdout)")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--subject", default="synthetic")
    p.set_defaults(func=_cmd_eval)

    p = registry["gradcheck"] = sub.add_parser(
        "gradcheck", help="finite-difference audit of the training objective")
    _add_common(p)
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="bound for the geometry-only objective")
    p.add_argument("--raster-tolerance", type=float, default=1e-3,
                   help="bound for the full objective (soft rasterizer)")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--budget", type=int, default=150,
                   help="coordinates to probe per check")
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--sharpness", type=float, default=DEFAULT_SHARPNESS)
    p.set_defaults(func=_cmd_gradcheck)

    p = registry["render"] = sub.add_parser(
        "render", help="rasterize one frame's reconstruction to PNGs")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--ckpt", help="checkpoint; omitted = undeformed template")
    p.add_argument("--sharpness", type=float, default=DEFAULT_SHARPNESS)
    p.set_defaults(func=_cmd_render)

    p = registry["serve"] = sub.add_parser(
        "serve", help="HTTP inference service around a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=_cmd_serve)

    return parser, registry


def _cmd_synth(args):
    config = SynthConfig(frames=args.frames, width=args.width,
                         height=args.height,
                         pose_amplitude=args.pose_amplitude,
                         wrinkle_amplitude=args.wrinkle_amplitude,
                         wrinkle_freq=args.wrinkle_freq,
                         phase_gain=args.phase_gain,
                         camera_scale=args.camera_scale,
                         sharpness=args.sharpness, seed=args.seed)
    body, rig = default_scene()
    dataset, gt = synth_sequence(config, body, rig)
    save_dataset(dataset, args.out_dir, body=body, rig=rig, gt=gt)
    print(f"wrote {len(dataset)} frames to {args.out_dir} "
          f"(train {len(dataset.train_indices)} / test {len(dataset.test_indices)})")
    return EXIT_OK


def _cmd_train(args):
    dataset, body, rig = load_scene(args.data, args.train_fraction)
    net_config = NetConfig(num_vertices=rig.template.num_vertices,
                           hypothesis_count=args.hypotheses,
                           init_std=args.init_std, seed=args.seed)
    net = init_params(net_config)
    weights = LossWeights(mask=args.w_mask, normal=args.w_normal,
                          edge=args.w_edge, face=args.w_face,
                          angle=args.w_angle, collision=args.w_collision,
                          epsilon=args.epsilon)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         lr=args.lr, weights=weights, seed=args.seed,
                         precision=args.precision,
                         optimize_blend_weights=not args.no_blend_weights,
                         sharpness=args.sharpness)
    result = train(dataset, body, rig, net, config, args.out_dir)
    print(f"trained {config.epochs} epochs; "
          f"final mean total {result.log[-1]['total']:.6g}; "
          f"best checkpoint {result.best_path}")
    return EXIT_OK


def _split_frames(dataset, split):
    if split == "train":
        return dataset.train_frames
    if split == "test":
        return dataset.test_frames
    return dataset.frames


def _cmd_animate(args):
    dataset, body, rig = load_scene(args.data, args.train_fraction)
    net, extra = net_from_checkpoint(args.ckpt)
    if net.config.num_vertices != rig.template.num_vertices:
        raise ValueError(f"checkpoint is for {net.config.num_vertices} "
                         f"vertices, garment has {rig.template.num_vertices}")
    frames = _split_frames(dataset, args.split)
    if not frames:
        raise ValueError(f"split {args.split!r} is empty")
    poses = [PoseParams(theta=f.theta, beta=f.beta) for f in frames]
    seq = animate(net, rig, body, poses,
                  blend_weights=extra.get(WEIGHTS_PARAM))
    os.makedirs(args.out_dir, exist_ok=True)
    for frame, mesh in zip(frames, seq.frames):
        save_obj(mesh, os.path.join(args.out_dir,
                                    f"{frame.frame_index:04d}.obj"))
    print(f"wrote {len(seq.frames)} meshes to {args.out_dir}")
    return EXIT_OK


def _load_obj_dir(dir_path):
    files = sorted(f for f in os.listdir(dir_path) if f.endswith(".obj"))
    if not files:
        raise ValueError(f"{dir_path}: no .obj files")
    return MeshSequence([load_obj(os.path.join(dir_path, f)) for f in files])


def _cmd_eval(args):
    pred = _load_obj_dir(args.pred)
    gt = _load_obj_dir(args.gt)
    report = evaluate(pred, gt, samples=args.samples, seed=args.seed)
    if args.out:
        write_metrics_csv(args.out, report, subject=args.subject)
        print(f"wrote {args.out}")
    else:
        ccv_cm = report.get("ccv_cm", float("nan"))
        print("subject,CD_cm,CCV_cm")
        print(f"{args.subject},{report['mean_cd_cm']:.6f},{ccv_cm:.6f}")
    return EXIT_OK


def _cmd_gradcheck(args):
    body, rig = default_scene()
    config = SynthConfig(frames=1, width=args.width, height=args.height,
                         seed=args.seed, sharpness=args.sharpness)
    dataset, _ = synth_sequence(config, body, rig)
    frame = dataset.frames[0]
    pose = PoseParams(theta=frame.theta, beta=frame.beta)
    transforms = body_transforms(body, pose)
    body_posed = pose_body(body, pose)

    net = init_params(NetConfig(num_vertices=rig.template.num_vertices,
                                init_std=0.05, seed=args.seed))
    net.cast(np.float64)
    weights_t = ad.Tensor(rig.blend_weights.copy(), requires_grad=True)
    params = dict(net.params)
    params[WEIGHTS_PARAM] = weights_t

    def objective(loss_weights):
        def loss_fn(_params):
            d = predict_displacement(net, frame.theta)
            posed = pose_garment_t(rig, d, transforms, weights=weights_t)
            total, _ = total_loss_t(frame, posed, rig, body_posed,
                                    frame.camera, loss_weights,
                                    args.sharpness)
            return total
        return loss_fn

    checks = (
        ("geometry terms", LossWeights(mask=0.0, normal=0.0), args.tolerance),
        ("full objective", LossWeights(), args.raster_tolerance),
    )
    ok = True
    for label, loss_weights, tol in checks:
        report = gradcheck(objective(loss_weights), params, step=args.step,
                           tolerance=tol, budget=args.budget, seed=args.seed)
        print(f"-- {label} (tolerance {tol:g}) --")
        print(report.table())
        ok = ok and report.passed
    return EXIT_OK if ok else EXIT_RUNTIME


def _cmd_render(args):
    dataset, body, rig = load_scene(args.data)
    by_index = {f.frame_index: f for f in dataset.frames}
    if args.frame not in by_index:
        raise ValueError(f"frame {args.frame} not in sequence")
    frame = by_index[args.frame]
    pose = PoseParams(theta=frame.theta, beta=frame.beta)

    blend_weights = None
    if args.ckpt:
        net, extra = net_from_checkpoint(args.ckpt)
        d = predict_displacement(net, frame.theta).data.astype(np.float64)
        blend_weights = extra.get(WEIGHTS_PARAM)
    else:
        d = np.zeros_like(rig.template.vertices)
    weights = (rig.blend_weights if blend_weights is None
               else np.asarray(blend_weights, dtype=np.float64))
    transforms = body_transforms(body, pose)
    posed = rig.template.with_vertices(
        pose_garment_t(rig, d, transforms, weights=weights).data)

    os.makedirs(args.out_dir, exist_ok=True)
    mask_path = os.path.join(args.out_dir, f"mask_{args.frame:04d}.png")
    normal_path = os.path.join(args.out_dir, f"normal_{args.frame:04d}.png")
    save_png(mask_path, rasterize_silhouette(posed, frame.camera,
                                             args.sharpness).data)
    save_png(normal_path, rasterize_normals(posed, frame.camera,
                                            args.sharpness).data)
    print(f"wrote {mask_path} and {normal_path}")
    return EXIT_OK


def _cmd_serve(args):
    import uvicorn

    from .service import create_app
    app = create_app(checkpoint=args.ckpt, data_dir=args.data)
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


def cli(argv=None):
    parser, registry = _build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            with open(known.config) as fh:
                defaults = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if not isinstance(defaults, dict):
            print("error: config must be a JSON object", file=sys.stderr)
            return EXIT_USAGE
        for sub in registry.values():
            sub.set_defaults(**defaults)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
