"""Command-line entry points.

    humanscene synth    --out DIR [--spec spec.json] [noise flags] [--seed N]
    humanscene optimize BUNDLE --out DIR [loss / stage flags]
    humanscene eval     PRED GT [--out metrics.txt]
    humanscene chain    --deltas deltas.npy --out root.tum [--first T.npy] [--local T_c.npy --cameras cams.tum]
    humanscene export   BUNDLE --format ply|tum --out PATH
    humanscene convert  --depth d.npy --intrinsics fx,fy,cx,cy --out DIR [...]

Exit codes: 0 success, 2 invalid input, 3 numerical failure. The thread
count and default seed can be set with HUMANSCENE_THREADS and HUMANSCENE_SEED.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .bundle import (
    Bundle, GroundTruth, atomic_write_text, load_bundle, save_bundle, write_ply, write_tum,
)
from .errors import HumanSceneError, NumericalError, ParseError, ValidationError
from .evaluate import evaluate_bundle
from .geom import DepthMap, Intrinsics, RigidTransform
from .human import BodyFrame, BodySequence
from .opt.config import ContactConfig, LossConfig, OptimConfig, PipelineConfig, StageConfig, config_snapshot
from .pipeline import camera_from_chain, chain_trajectory, run_pipeline
from .scene import FrameInit, MatchSet, assemble_pointcloud
from .synth import NoiseSpec, ScenarioSpec, generate_scenario, perturb_initialization

log = logging.getLogger("humanscene")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _env_int(name, default):
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"{name} must be an integer, got {raw!r}") from None


def _flag(name):
    return "--" + name.replace("_", "-")


def _parse_bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _optional_float(text):
    return None if str(text).lower() == "none" else float(text)


def _add_loss_flags(p):
    g = p.add_argument_group("loss")
    for f in dataclasses.fields(LossConfig):
        default = f.default
        if f.name == "prior_rotation_weight":
            g.add_argument(_flag(f.name), type=_optional_float, default=default)
        elif f.name == "robust":
            g.add_argument(_flag(f.name), choices=("huber", "l2", "l1"), default=default)
        else:
            g.add_argument(_flag(f.name), type=float, default=default)


_STAGE_FIELDS = ("iterations", "learning_rate", "optimize_depth", "optimize_intrinsics", "optimize_poses",
                 "optimize_scales", "optimize_body", "schedule", "lr_min_ratio")
_SHORT = {"iterations": "iters", "learning_rate": "lr"}


def _add_stage_flags(p, name, stage: StageConfig):
    g = p.add_argument_group(name)
    for field in _STAGE_FIELDS:
        flag = f"--{name}-{_SHORT.get(field, field).replace('_', '-')}"
        value = getattr(stage, field)
        if isinstance(value, bool):
            g.add_argument(flag, type=_parse_bool, default=value, metavar="BOOL")
        elif field == "schedule":
            g.add_argument(flag, choices=("cosine", "constant"), default=value)
        else:
            g.add_argument(flag, type=type(value), default=value)
    for key in ("w_3d", "w_2d"):
        g.add_argument(f"--{name}-{key.replace('_', '-')}", type=float, default=stage.weights[key])


def _stage_from_args(args, name):
    kw = {f: getattr(args, f"{name}_{_SHORT.get(f, f)}") for f in _STAGE_FIELDS}
    weights = {k: getattr(args, f"{name}_{k}") for k in ("w_3d", "w_2d")}
    return StageConfig(weights=weights, **kw)


def pipeline_config_from_args(args) -> PipelineConfig:
    loss = LossConfig(**{f.name: getattr(args, f.name) for f in dataclasses.fields(LossConfig)})
    contact = ContactConfig(args.max_px, args.visibility_radius, args.contact_threshold, args.track_projection)
    optim = OptimConfig(
        loss=loss, stage1=_stage_from_args(args, "stage1"), stage2=_stage_from_args(args, "stage2"),
        contact=contact, depth_downsample=args.depth_downsample, coupled_scale=args.coupled_scale,
        pin_first_camera=args.pin_first_camera, keep_best=args.keep_best,
    )
    return PipelineConfig(optim=optim, segment_length=args.segment_length,
                          keyframe_interval_s=args.keyframe_interval, seed=args.seed, workers=args.workers)


# --- subcommands -----------------------------------------------------------

def cmd_synth(args):
    spec = ScenarioSpec()
    if args.spec:
        try:
            spec = ScenarioSpec.from_dict(json.loads(Path(args.spec).read_text()))
        except json.JSONDecodeError as err:
            raise ParseError(f"{args.spec}: {err}") from err
    overrides = {k: v for k, v in (("n_frames", args.frames), ("n_persons", args.persons)) if v is not None}
    if overrides:
        spec = dataclasses.replace(spec, **overrides)
    noise = NoiseSpec(
        depth_noise=args.depth_noise, match_noise=args.match_noise, outlier_fraction=args.outlier_fraction,
        pose_noise=args.pose_noise, sigma_init=args.sigma_init, sigma_noise=args.sigma_noise,
        contact_flip_rate=args.contact_flip_rate, body_noise=args.body_noise, foot_slide=args.foot_slide,
    )
    scenario = generate_scenario(spec, args.seed)
    out = Path(args.out)
    save_bundle(scenario.bundle(), out / "gt")
    save_bundle(perturb_initialization(scenario, noise, args.seed), out / "init")
    atomic_write_text(out / "scenario.json", json.dumps(
        {"spec": spec.to_dict(), "noise": dataclasses.asdict(noise), "seed": args.seed}, indent=1, sort_keys=True)
        + "\n")
    log.info("wrote %d-frame scenario to %s", spec.n_frames, out)
    return EXIT_OK


def _trajectory_exports(out: Path, result_bundle: Bundle):
    fps = result_bundle.fps
    poses = result_bundle.poses
    write_tum(out / "cameras.tum", [t / fps for t in range(len(poses))], poses)
    for seq in result_bundle.persons:
        roots = [poses[bf.frame_id] @ bf.T_c for bf in seq.frames]
        write_tum(out / f"root_{seq.person_id}.tum", [bf.frame_id / fps for bf in seq.frames], roots)
    cloud = assemble_pointcloud(result_bundle.frames, poses, keep_stride=16)
    write_ply(out / "points.ply", cloud)


def cmd_optimize(args):
    cfg = pipeline_config_from_args(args)
    bundle = load_bundle(args.bundle)
    log.info("optimizing %d frames, %d persons", bundle.frame_count, len(bundle.persons))
    result = run_pipeline(bundle, cfg)
    out_bundle = result.to_bundle(bundle)
    out_bundle.ground_truth = bundle.ground_truth
    out = Path(args.out)
    save_bundle(out_bundle, out / "result")
    _trajectory_exports(out, out_bundle)
    lines = "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in result.history)
    atomic_write_text(out / "loss_history.jsonl", lines)
    atomic_write_text(out / "config.json", json.dumps(config_snapshot(cfg), indent=1, sort_keys=True) + "\n")
    if bundle.ground_truth is not None:
        report = evaluate_bundle(out_bundle, bundle.ground_truth)
        atomic_write_text(out / "metrics.txt", report.to_text())
        sys.stdout.write(report.to_text())
    return EXIT_OK


def _ground_truth_of(b: Bundle) -> GroundTruth:
    if b.ground_truth is not None:
        return b.ground_truth
    poses = b.poses
    if poses is None:
        return GroundTruth(None, None, None, list(b.persons))
    return GroundTruth(list(poses), b.scales, [f.depth for f in b.frames], list(b.persons))


def cmd_eval(args):
    pred = load_bundle(args.pred)
    gt = _ground_truth_of(load_bundle(args.gt))
    report = evaluate_bundle(pred, gt)
    text = report.to_text()
    if args.out:
        atomic_write_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def _load_transforms(path, what):
    arr = np.load(path)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (4, 4):
        raise ValidationError(f"{path}: {what} must be (N, 4, 4), got {arr.shape}")
    return [RigidTransform.from_matrix(m) for m in arr]


def cmd_chain(args):
    deltas = _load_transforms(args.deltas, "relative transforms") if args.deltas else []
    first = _load_transforms(args.first, "first transform")[0] if args.first else RigidTransform.identity()
    T_g = chain_trajectory(first, deltas)
    stamps = [t / args.fps for t in range(len(T_g))]
    write_tum(args.out, stamps, T_g)
    if args.local:
        if not args.cameras:
            raise ValidationError("--local requires --cameras")
        cams = camera_from_chain(T_g, _load_transforms(args.local, "local transforms"))
        write_tum(args.cameras, stamps, cams)
    return EXIT_OK


def cmd_export(args):
    b = load_bundle(args.bundle)
    if b.poses is None:
        raise ValidationError(f"{args.bundle}: bundle has no camera poses to export")
    if args.format == "ply":
        write_ply(args.out, assemble_pointcloud(b.frames, b.poses, keep_stride=args.stride))
    elif args.person is None:
        write_tum(args.out, [t / b.fps for t in range(b.frame_count)], b.poses)
    else:
        seq = next((s for s in b.persons if s.person_id == args.person), None)
        if seq is None:
            raise ValidationError(f"no person {args.person!r} in bundle")
        write_tum(args.out, [bf.frame_id / b.fps for bf in seq.frames],
                  [b.poses[bf.frame_id] @ bf.T_c for bf in seq.frames])
    return EXIT_OK


def _intrinsics(text, shape):
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 4:
        raise ValidationError("--intrinsics expects fx,fy,cx,cy")
    return Intrinsics(*parts, width=shape[1], height=shape[0])


def cmd_convert(args):
    depth = np.load(args.depth).astype(np.float64)
    if depth.ndim != 3:
        raise ValidationError(f"{args.depth}: depth must be (frames, height, width), got {depth.shape}")
    n, H, W = depth.shape
    K = _intrinsics(args.intrinsics, (H, W))
    masks = np.load(args.masks).astype(bool) if args.masks else np.zeros_like(depth, dtype=bool)
    valid = np.isfinite(depth) & (depth > 0)
    frames = [FrameInit(t, K, DepthMap(np.where(valid[t], depth[t], 1.0), valid[t]), args.scale, masks[t])
              for t in range(n)]
    matches = {}
    if args.matches:
        with np.load(args.matches) as z:
            for key in sorted(z.files):
                i, j = (int(x) for x in key.split("_"))
                matches[(i, j)] = MatchSet.from_array((i, j), z[key], clamp=True)
    persons = []
    if args.vertices:
        V = np.load(args.vertices)
        J = np.load(args.joints)
        T = np.load(args.t_c)
        prob = np.load(args.contact_prob) if args.contact_prob else np.zeros(V.shape[:2])
        if not (V.shape[0] == J.shape[0] == T.shape[0] == prob.shape[0] == n):
            raise ValidationError("body arrays must have one entry per frame")
        contact = prob >= args.contact_threshold
        persons.append(BodySequence([
            BodyFrame(V[t], J[t], RigidTransform.from_matrix(T[t]), contact[t], args.person_id, t)
            for t in range(n)], args.fps))
    poses = _load_transforms(args.poses, "camera poses") if args.poses else None
    save_bundle(Bundle(args.fps, K, frames, poses, matches, persons), args.out)
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def build_parser():
    seed_default = _env_int("HUMANSCENE_SEED", 0)
    p = argparse.ArgumentParser(prog="humanscene", description="Joint human-scene metric reconstruction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a ground-truth + initialization bundle pair")
    s.add_argument("--out", required=True)
    s.add_argument("--spec", help="JSON file with scenario fields")
    s.add_argument("--seed", type=int, default=seed_default)
    s.add_argument("--frames", type=int)
    s.add_argument("--persons", type=int)
    for f in dataclasses.fields(NoiseSpec):
        if f.name == "sigma_init":
            s.add_argument(_flag(f.name), type=float, default=None)
        else:
            s.add_argument(_flag(f.name), type=float, default=f.default)
    s.set_defaults(func=cmd_synth)

    o = sub.add_parser("optimize", help="run the segment/keyframe two-stage optimization")
    o.add_argument("bundle")
    o.add_argument("--out", required=True)
    o.add_argument("--seed", type=int, default=seed_default)
    o.add_argument("--workers", type=int, default=1)
    _add_loss_flags(o)
    _add_stage_flags(o, "stage1", OptimConfig().stage1)
    _add_stage_flags(o, "stage2", OptimConfig().stage2)
    d = PipelineConfig()
    o.add_argument("--segment-length", type=int, default=d.segment_length)
    o.add_argument("--keyframe-interval", type=float, default=d.keyframe_interval_s)
    o.add_argument("--depth-downsample", type=int, default=d.optim.depth_downsample)
    o.add_argument("--coupled-scale", type=_parse_bool, default=d.optim.coupled_scale, metavar="BOOL")
    o.add_argument("--pin-first-camera", type=_parse_bool, default=d.optim.pin_first_camera, metavar="BOOL")
    o.add_argument("--keep-best", type=_parse_bool, default=d.optim.keep_best, metavar="BOOL")
    o.add_argument("--max-px", type=float, default=d.optim.contact.max_px)
    o.add_argument("--visibility-radius", type=int, default=d.optim.contact.visibility_radius)
    o.add_argument("--contact-threshold", type=float, default=d.optim.contact.label_threshold)
    o.add_argument("--track-projection", type=_parse_bool, default=d.optim.contact.track_projection,
                   metavar="BOOL")
    o.set_defaults(func=cmd_optimize)

    e = sub.add_parser("eval", help="compute the metric report of a prediction")
    e.add_argument("pred")
    e.add_argument("gt", help="bundle with a ground-truth section, or a bundle taken as ground truth")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("chain", help="compose per-frame relative body transforms into trajectories")
    c.add_argument("--deltas", help=".npy of (N-1, 4, 4) world-frame relative transforms")
    c.add_argument("--first", help=".npy 4x4 first local transform (default identity)")
    c.add_argument("--local", help=".npy (N, 4, 4) local transforms; with --cameras writes camera poses")
    c.add_argument("--cameras")
    c.add_argument("--fps", type=float, default=30.0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_chain)

    x = sub.add_parser("export", help="export a bundle's point cloud (PLY) or trajectory (TUM)")
    x.add_argument("bundle")
    x.add_argument("--format", choices=("ply", "tum"), required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--stride", type=int, default=1)
    x.add_argument("--person", help="export this person's root trajectory instead of the cameras")
    x.set_defaults(func=cmd_export)

    v = sub.add_parser("convert", help="build a bundle from upstream .npy outputs")
    v.add_argument("--depth", required=True, help="(N, H, W) depth maps")
    v.add_argument("--intrinsics", required=True, help="fx,fy,cx,cy")
    v.add_argument("--masks", help="(N, H, W) human masks")
    v.add_argument("--matches", help=".npz with arrays named 'i_j' of shape (M, 11)")
    v.add_argument("--poses", help="(N, 4, 4) camera-to-world poses")
    v.add_argument("--vertices", help="(N, V, 3) posed vertices in the body frame")
    v.add_argument("--joints")
    v.add_argument("--t-c", help="(N, 4, 4) body-to-camera transforms")
    v.add_argument("--contact-prob", help="(N, V) per-vertex contact probabilities")
    v.add_argument("--contact-threshold", type=float, default=0.5)
    v.add_argument("--person-id", default="p0")
    v.add_argument("--scale", type=float, default=1.0)
    v.add_argument("--fps", type=float, default=30.0)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_convert)
    return p


def main(argv=None):
    try:
        parser = build_parser()
    except ValidationError as err:
        print(f"humanscene: {err}", file=sys.stderr)
        return EXIT_INVALID
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        threads = _env_int("HUMANSCENE_THREADS", 0)
        if threads > 0:
            torch.set_num_threads(threads)
        if args.command == "convert" and args.vertices and not (args.t_c and args.joints):
            raise ValidationError("--vertices requires --t-c and --joints")
        return args.func(args)
    except ValidationError as err:
        print(f"humanscene: invalid input: {err}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as err:
        print(f"humanscene: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError) as err:
        print(f"humanscene: {err}", file=sys.stderr)
        return EXIT_INVALID
    except HumanSceneError as err:
        print(f"humanscene: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
