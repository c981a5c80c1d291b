"""Metric suite for world-grounded human motion and metric-scale scene geometry.

None of the metrics fit a scale: predictions are compared against ground
truth in meters after at most a rigid alignment. The one exception is the
optional ``with_scale`` flag on ``ate`` for comparison with scale-aligned
numbers reported elsewhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateConfiguration, DegenerateMatches, EmptyCloud, LengthMismatch, NoValidPixels, ValidationError,
    ZeroPathLength,
)
from .geom import DepthMap, RigidTransform
from .scene import assemble_pointcloud, umeyama

FULL = "full"
FIRST_TWO = "first_two_frames"
SEGMENT_FRAMES = 100
MIN_TAIL_FRAMES = 10


def rigid_align(source, target, mode=FULL, with_scale=False):
    """Least-squares rigid transform G with target ~ G(source).

    ``source``/``target`` are either (k, 3) point sets or (F, J, 3) per-frame
    joints. In ``first_two_frames`` mode only the first two frames are fitted
    (all of their joints jointly); a (k, 3) input counts one point per frame.
    Returns ``(G, s)`` when ``with_scale`` is set, else ``G``.
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.shape != dst.shape:
        raise LengthMismatch(f"source {src.shape} vs target {dst.shape}")
    if src.shape[-1] != 3:
        raise ValidationError("points must be 3-vectors")
    if mode == FIRST_TWO:
        if src.shape[0] < 2:
            raise DegenerateConfiguration("first-two-frames alignment needs at least two frames")
        src, dst = src[:2], dst[:2]
    elif mode != FULL:
        raise ValidationError(f"unknown alignment mode {mode!r}")
    src = src.reshape(-1, 3)
    dst = dst.reshape(-1, 3)
    try:
        s, R, t = umeyama(src, dst, with_scale=with_scale)
    except DegenerateMatches as err:
        raise DegenerateConfiguration(str(err)) from err
    G = RigidTransform(R, t)
    return (G, s) if with_scale else G


def segment_ranges(n_frames, length=SEGMENT_FRAMES, min_tail=MIN_TAIL_FRAMES):
    """[start, stop) ranges of ``length`` frames; a short tail is merged into its predecessor."""
    if n_frames < 1:
        return []
    out = [[s, min(s + length, n_frames)] for s in range(0, n_frames, length)]
    if len(out) > 1 and out[-1][1] - out[-1][0] < min_tail:
        tail = out.pop()
        out[-1][1] = tail[1]
    return [tuple(r) for r in out]


def _check_pair(pred, gt, what):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise LengthMismatch(f"{what}: prediction {p.shape} vs ground truth {g.shape}")
    return p, g


def mpjpe_segments(pred_joints, gt_joints, mode=FULL, length=SEGMENT_FRAMES):
    """Per-segment mean joint error in millimeters (inputs in meters, (F, J, 3))."""
    p, g = _check_pair(pred_joints, gt_joints, "joints")
    if p.ndim != 3 or p.shape[-1] != 3:
        raise ValidationError(f"joints must be (frames, joints, 3), got {p.shape}")
    out = []
    for a, b in segment_ranges(p.shape[0], length):
        G = rigid_align(p[a:b], g[a:b], mode)
        aligned = G.apply(p[a:b].reshape(-1, 3)).reshape(p[a:b].shape)
        out.append(1000.0 * float(np.linalg.norm(aligned - g[a:b], axis=-1).mean()))
    return out


def mpjpe_100(pred_joints, gt_joints, mode=FULL, length=SEGMENT_FRAMES):
    """WA-MPJPE (mode ``full``) or W-MPJPE (mode ``first_two_frames``) in millimeters."""
    segs = mpjpe_segments(pred_joints, gt_joints, mode, length)
    if not segs:
        raise LengthMismatch("no frames to evaluate")
    return float(np.mean(segs))


def path_length(points):
    p = np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def rte(pred_root, gt_root):
    """Root translation error in percent of the ground-truth path length."""
    p, g = _check_pair(pred_root, gt_root, "root trajectory")
    if p.ndim != 2 or p.shape[0] < 2:
        raise LengthMismatch("root trajectories need at least two frames")
    length = path_length(g)
    if not length > 0:
        raise ZeroPathLength("ground-truth root does not move")
    G = rigid_align(p, g, FULL)
    err = np.linalg.norm(G.apply(p) - g, axis=1).mean()
    return float(100.0 * err / length)


def _centers(cams):
    return np.array([c.translation if isinstance(c, RigidTransform) else np.asarray(c, float)[:3, 3]
                     for c in cams])


def ate(pred_cams, gt_cams, with_scale=False):
    """RMS camera-center error in meters after rigid (optionally similarity) alignment."""
    if len(pred_cams) != len(gt_cams):
        raise LengthMismatch(f"{len(pred_cams)} predicted vs {len(gt_cams)} ground-truth cameras")
    p, g = _centers(pred_cams), _centers(gt_cams)
    if with_scale:
        G, s = rigid_align(p, g, FULL, with_scale=True)
        moved = s * (p @ G.rotation.T) + G.translation
    else:
        moved = rigid_align(p, g, FULL).apply(p)
    return float(np.sqrt(np.mean(np.sum((moved - g) ** 2, axis=1))))


def _depth_arrays(maps):
    vals, valid = [], []
    for d in maps:
        if isinstance(d, DepthMap):
            vals.append(d.values)
            valid.append(d.validity)
        else:
            a = np.asarray(d, dtype=np.float64)
            vals.append(a)
            valid.append(np.isfinite(a) & (a > 0))
    return vals, valid


def depth_pairs(pred, gt):
    """Flattened (pred, gt) metric depths over the validity intersection."""
    if len(pred) != len(gt):
        raise LengthMismatch(f"{len(pred)} predicted vs {len(gt)} ground-truth depth maps")
    pv, pm = _depth_arrays(pred)
    gv, gm = _depth_arrays(gt)
    ps, gs = [], []
    for k, (a, ma, b, mb) in enumerate(zip(pv, pm, gv, gm)):
        if a.shape != b.shape:
            raise LengthMismatch(f"frame {k}: depth {a.shape} vs {b.shape}")
        ok = ma & mb & (a > 0) & (b > 0)
        ps.append(a[ok])
        gs.append(b[ok])
    p = np.concatenate(ps) if ps else np.zeros(0)
    g = np.concatenate(gs) if gs else np.zeros(0)
    if p.size == 0:
        raise NoValidPixels("no pixel is valid in both prediction and ground truth")
    return p, g


def depth_metrics(pred, gt):
    """(AbsRel, fraction with max(pred/gt, gt/pred) < 1.25), pooled over all valid pixels."""
    p, g = depth_pairs(pred, gt)
    abs_rel = float(np.mean(np.abs(p - g) / g))
    delta = float(np.mean(np.maximum(p / g, g / p) < 1.25))
    return abs_rel, delta


def chamfer(pred_cloud, gt_cloud):
    """Symmetric mean nearest-neighbor distance in meters."""
    a = np.asarray(pred_cloud, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(gt_cloud, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloud("chamfer distance needs two nonempty clouds")
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def world_joints_array(seq, poses):
    """(F, J, 3) world joints P^t T_c^t J^t for a body sequence."""
    return np.stack([(poses[bf.frame_id] @ bf.T_c).apply(bf.joints) for bf in seq.frames])


def world_roots_array(seq, poses):
    return np.stack([(poses[bf.frame_id] @ bf.T_c).translation for bf in seq.frames])


# --- report ----------------------------------------------------------------

@dataclass
class MetricReport:
    wa_mpjpe_100: float | None = None
    w_mpjpe_100: float | None = None
    rte_percent: float | None = None
    ate: float | None = None
    abs_rel: float | None = None
    delta_125: float | None = None
    chamfer: float | None = None
    depth_valid_pixels: int | None = None
    segments: dict = field(default_factory=dict)  # metric name -> per-segment values

    SCALARS = ("wa_mpjpe_100", "w_mpjpe_100", "rte_percent", "ate", "abs_rel", "delta_125", "chamfer",
               "depth_valid_pixels")

    def as_dict(self):
        out = {k: getattr(self, k) for k in self.SCALARS if getattr(self, k) is not None}
        for name, vals in sorted(self.segments.items()):
            for k, v in enumerate(vals):
                out[f"{name}.segment{k}"] = v
        return out

    def to_text(self):
        """Flat ``key = value`` lines; floats use repr so the text round-trips exactly."""
        return "".join(f"{k} = {v!r}\n" for k, v in self.as_dict().items())

    @classmethod
    def from_text(cls, text):
        rep = cls()
        names = {f.name for f in fields(cls)}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            value = int(raw) if key == "depth_valid_pixels" else float(raw)
            if "." in key:
                name, _, seg = key.partition(".")
                rep.segments.setdefault(name, []).append((int(seg.removeprefix("segment")), value))
            elif key in names:
                setattr(rep, key, value)
        rep.segments = {k: [v for _, v in sorted(vals)] for k, vals in rep.segments.items()}
        return rep


def evaluate_scene(poses, scales, depths, gt, frames=None, chamfer_stride=16):
    """Camera, depth and point-cloud metrics against a GroundTruth with a scene part."""
    out = {}
    out["ate"] = ate(poses, gt.poses)
    pred_metric = [DepthMap(s * d.values, d.validity) for s, d in zip(scales, depths)]
    gt_metric = [DepthMap(s * d.values, d.validity) for s, d in zip(gt.scales, gt.depths)]
    p, _ = depth_pairs(pred_metric, gt_metric)
    out["abs_rel"], out["delta_125"] = depth_metrics(pred_metric, gt_metric)
    out["depth_valid_pixels"] = int(p.size)
    if frames is not None:
        from .scene import FrameInit

        pf = [FrameInit(f.frame_id, f.intrinsics, d, float(s), f.mask) for f, d, s in zip(frames, depths, scales)]
        gf = [FrameInit(f.frame_id, f.intrinsics, d, float(s), f.mask) for f, d, s in zip(frames, gt.depths, gt.scales)]
        out["chamfer"] = chamfer(assemble_pointcloud(pf, poses, chamfer_stride),
                                 assemble_pointcloud(gf, gt.poses, chamfer_stride))
    return out


def evaluate_bundle(pred, gt, chamfer_stride=16):
    """Full MetricReport of a predicted bundle against ground truth.

    Human metrics average over persons present in both; scene metrics are
    omitted when the ground truth has no scene part.
    """
    if pred.frame_count != (len(gt.poses) if gt.has_scene else pred.frame_count):
        raise LengthMismatch("prediction and ground truth cover different frame counts")
    if pred.poses is None:
        raise ValidationError("prediction has no camera poses")
    rep = MetricReport()
    gt_by_id = {seq.person_id: seq for seq in gt.persons}
    wa, w, r = [], [], []
    for seq in pred.persons:
        ref = gt_by_id.get(seq.person_id)
        if ref is None:
            continue
        if ref.frame_ids != seq.frame_ids:
            raise LengthMismatch(f"person {seq.person_id}: frame lists differ")
        gt_poses = gt.poses if gt.has_scene else pred.poses
        pj, gj = world_joints_array(seq, pred.poses), world_joints_array(ref, gt_poses)
        wa.append(mpjpe_segments(pj, gj, FULL))
        w.append(mpjpe_segments(pj, gj, FIRST_TWO))
        r.append(rte(world_roots_array(seq, pred.poses), world_roots_array(ref, gt_poses)))
    if wa:
        rep.wa_mpjpe_100 = float(np.mean([np.mean(x) for x in wa]))
        rep.w_mpjpe_100 = float(np.mean([np.mean(x) for x in w]))
        rep.rte_percent = float(np.mean(r))
        rep.segments["wa_mpjpe_100"] = [float(v) for v in np.mean(wa, axis=0)]
        rep.segments["w_mpjpe_100"] = [float(v) for v in np.mean(w, axis=0)]
    if gt.has_scene:
        scene = evaluate_scene(pred.poses, pred.scales, [f.depth for f in pred.frames], gt, pred.frames,
                               chamfer_stride)
        for k, v in scene.items():
            setattr(rep, k, v)
    return rep


__all__ = [
    "FIRST_TWO", "FULL", "MetricReport", "ate", "chamfer", "depth_metrics", "depth_pairs", "evaluate_bundle",
    "evaluate_scene", "mpjpe_100", "mpjpe_segments", "path_length", "rigid_align", "rte", "segment_ranges",
    "world_joints_array", "world_roots_array",
]
