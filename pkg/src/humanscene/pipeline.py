"""Sequence orchestration: segments, keyframes, interpolation, stitching and chaining."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bundle import Bundle
from .errors import IndexMismatch, MissingOverlap, NoValidFrames, OutOfRange
from .geom import DepthMap, Intrinsics, RigidTransform
from .human import BodySequence, interpolate_poses
from .opt.config import PipelineConfig
from .opt.optimizer import run_two_stage
from .opt.problem import build_problem, current_depth
from .scene import FrameInit, SceneGraph, canonical_edge, check_connected, coarse_align, trim_by_masks

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegmentBounds:
    start: int
    end: int

    def __iter__(self):
        return iter((self.start, self.end))

    @property
    def frames(self):
        return list(range(self.start, self.end + 1))


def split_segments(frame_count, segment_length=100):
    """Contiguous segments of ``segment_length`` frames sharing one overlap frame."""
    if frame_count < 1:
        raise OutOfRange("frame_count must be >= 1")
    if segment_length < 2:
        raise OutOfRange("segment_length must be >= 2")
    out = []
    start = 0
    while True:
        end = min(start + segment_length - 1, frame_count - 1)
        out.append(SegmentBounds(start, end))
        if end == frame_count - 1:
            return out
        start = end


def sample_keyframes(fps, interval_s=0.2, segment=(0, 0)):
    """Frames at floor(k * interval * fps) from the segment start, plus both endpoints."""
    if not fps > 0:
        raise OutOfRange("fps must be positive")
    start, end = segment
    step = interval_s * fps
    ids = {start, end}
    if step > 0:
        k = 0
        while True:
            f = start + int(math.floor(k * step + 1e-9))
            if f > end:
                break
            ids.add(f)
            k += 1
    return sorted(ids)


def interpolate_cameras(key_ids, key_poses, targets):
    if len(key_ids) != len(key_poses):
        raise IndexMismatch("one pose per keyframe required")
    return [interpolate_poses(list(key_ids), list(key_poses), t) for t in targets]


def interpolate_log(key_ids, values, targets):
    """Log-linear interpolation of positive per-keyframe values."""
    return np.exp(np.interp(np.asarray(targets, dtype=float), key_ids, np.log(values)))


def chain_trajectory(T_c_1: RigidTransform, deltas):
    """T_g^1 = T_c^1 and T_g^{t+1} = dT^t T_g^t (world anchored to the first camera)."""
    out = [T_c_1]
    for d in deltas:
        out.append(d @ out[-1])
    return out


def relative_deltas(T_g):
    """Per-gap world-frame deltas with T_g^{t+1} = dT^t T_g^t."""
    return [b @ a.inverse() for a, b in zip(T_g[:-1], T_g[1:])]


def camera_from_chain(T_g, T_c):
    if len(T_g) != len(T_c):
        raise IndexMismatch(f"{len(T_g)} global transforms vs {len(T_c)} local transforms")
    return [g @ c.inverse() for g, c in zip(T_g, T_c)]


def median_scale_baseline(body_center_depths, predicted_depths_at_center):
    """Median over frames of metric body depth divided by predicted depth."""
    a = np.asarray(body_center_depths, dtype=np.float64).reshape(-1)
    b = np.asarray(predicted_depths_at_center, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise IndexMismatch("one predicted depth per body depth required")
    ok = np.isfinite(a) & np.isfinite(b) & (a > 0) & (b > 0)
    if not ok.any():
        raise NoValidFrames("no frame has a positive body depth and prediction")
    return float(np.median(a[ok] / b[ok]))


def body_center_depths(bundle: Bundle, person=0):
    """(metric camera depth of the pelvis, pre-scale depth at its pixel) per frame."""
    seq = bundle.persons[person]
    K = bundle.K
    body, pred = [], []
    for bf in seq.frames:
        c = bf.T_c.translation
        fr = bundle.frames[bf.frame_id]
        if c[2] <= 1e-6:
            body.append(np.nan)
            pred.append(np.nan)
            continue
        u = int(np.floor(K.fx * c[0] / c[2] + K.cx + 0.5))
        v = int(np.floor(K.fy * c[1] / c[2] + K.cy + 0.5))
        body.append(c[2])
        if 0 <= v < K.height and 0 <= u < K.width and fr.depth.validity[v, u]:
            pred.append(fr.depth.values[v, u])
        else:
            pred.append(np.nan)
    return np.array(body), np.array(pred)


# --- segment optimization -------------------------------------------------

@dataclass
class SegmentResult:
    bounds: SegmentBounds
    keyframes: list
    K: Intrinsics
    poses: list  # one per frame in bounds
    scales: np.ndarray
    depths: list  # pre-scale DepthMap per frame
    T_c: list  # per person: {frame_id: RigidTransform}
    history: list = field(default_factory=list)
    stage_losses: list = field(default_factory=list)
    links: int = 0

    def pose(self, t):
        return self.poses[t - self.bounds.start]

    def scale(self, t):
        return self.scales[t - self.bounds.start]


def _keyframe_matches(bundle: Bundle, keys):
    keyset = set(keys)
    out = {}
    for (i, j), ms in bundle.matches.items():
        if i in keyset and j in keyset:
            ms = trim_by_masks(ms, bundle.frames[i].mask, bundle.frames[j].mask)
            if len(ms):
                e = canonical_edge(i, j)
                out[e] = ms if e == (i, j) else ms.swapped()
    return out


def _initial_key_poses(bundle: Bundle, keys, matches):
    if bundle.poses is not None:
        return [bundle.poses[k] for k in keys], np.array([bundle.frames[k].scale for k in keys])
    graph = SceneGraph(tuple(keys), frozenset(matches))
    check_connected(graph)
    init = coarse_align(graph, matches, sigma0=bundle.frames[keys[0]].scale)
    return init.poses, init.scales


def _interpolate_correction(key_ids, corrections, t):
    if t <= key_ids[0]:
        return corrections[0]
    if t >= key_ids[-1]:
        return corrections[-1]
    return interpolate_poses(key_ids, corrections, t)


def optimize_segment(bundle: Bundle, bounds: SegmentBounds, cfg: PipelineConfig) -> SegmentResult:
    keys = sample_keyframes(bundle.fps, cfg.keyframe_interval_s, bounds)
    matches = _keyframe_matches(bundle, keys)
    poses0, scales0 = _initial_key_poses(bundle, keys, matches)
    frames = [bundle.frames[k] for k in keys]
    frames = [FrameInit(f.frame_id, f.intrinsics, f.depth, float(s), f.mask) for f, s in zip(frames, scales0)]
    problem, params = build_problem(bundle.K, frames, poses0, matches, bundle.persons,
                                    cfg.optim.depth_downsample, cfg.optim.coupled_scale)
    result = run_two_stage(problem, params, cfg.optim, seed=cfg.seed)
    opt = result.params
    K = opt.intrinsics(bundle.K)
    key_poses = opt.poses()
    key_sigma = opt.sigma.numpy()
    ids = bounds.frames
    poses = interpolate_cameras(keys, key_poses, ids)
    scales = interpolate_log(keys, key_sigma, ids)
    depths = []
    key_index = {k: n for n, k in enumerate(keys)}
    for t in ids:
        fr = bundle.frames[t]
        if t in key_index:
            z = current_depth(problem, opt, key_index[t])
            depths.append(DepthMap(np.where(fr.depth.validity, z, fr.depth.values), fr.depth.validity))
        else:
            depths.append(fr.depth)
    bodies = opt.body_transforms()
    T_c = []
    for seq in bundle.persons:
        pd = next((p for p in problem.persons if p.person_id == seq.person_id), None)
        by_frame = seq.by_frame()
        out = {}
        if pd is None:
            out = {t: by_frame[t].T_c for t in ids if t in by_frame}
        else:
            kf = [problem.frame_ids[f] for f in pd.frames]
            corr = [bodies[r] @ by_frame[k].T_c.inverse() for r, k in zip(pd.rows, kf)]
            for t in ids:
                if t in by_frame:
                    out[t] = _interpolate_correction(kf, corr, t) @ by_frame[t].T_c
        T_c.append(out)
    for rec in result.history:
        rec["segment"] = bounds.start
    links = sum(s.contacts.n_links for s in result.stages)
    return SegmentResult(bounds, keys, K, poses, scales, depths, T_c, result.history,
                         [(s.initial_loss, s.final_loss) for s in result.stages], links)


@dataclass
class PipelineResult:
    K: Intrinsics
    poses: list
    scales: np.ndarray
    depths: list
    persons: list  # BodySequences with optimized T_c
    history: list
    segments: list
    scale_disagreement: list  # ratio of scales at each overlap frame

    def to_bundle(self, source: Bundle) -> Bundle:
        frames = [FrameInit(t, self.K, d, float(s), source.frames[t].mask)
                  for t, (d, s) in enumerate(zip(self.depths, self.scales))]
        return Bundle(source.fps, self.K, frames, list(self.poses), dict(source.matches), list(self.persons))


def stitch_segments(segments, persons=()):
    """Rigidly re-anchor each segment onto its predecessor at the shared frame.

    Returns (poses, scales, depths, T_c per person as {frame: transform}, overlap scale ratios).
    """
    if not segments:
        raise MissingOverlap("nothing to stitch")
    poses, scales, depths = list(segments[0].poses), list(segments[0].scales), list(segments[0].depths)
    T_c = [dict(d) for d in segments[0].T_c]
    ratios = []
    prev = segments[0]
    for seg in segments[1:]:
        ov = seg.bounds.start
        if ov != prev.bounds.end:
            raise MissingOverlap(f"segment starting at {ov} does not share frame {prev.bounds.end}")
        G = poses[ov] @ seg.pose(ov).inverse()  # anchor on the already stitched pose
        ratios.append(float(seg.scale(ov) / prev.scale(ov)))
        poses.extend(G @ P for P in seg.poses[1:])
        scales.extend(seg.scales[1:])
        depths.extend(seg.depths[1:])
        for o, d in enumerate(seg.T_c):
            if o >= len(T_c):
                T_c.append({})
            for t, T in d.items():
                if t != ov or t not in T_c[o]:
                    T_c[o][t] = T
        prev = seg
    return poses, np.array(scales), depths, T_c, ratios


def run_pipeline(bundle: Bundle, cfg: PipelineConfig = PipelineConfig()) -> PipelineResult:
    bounds = split_segments(bundle.frame_count, cfg.segment_length)
    if cfg.workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            segments = list(pool.map(lambda b: optimize_segment(bundle, b, cfg), bounds))
    else:
        segments = [optimize_segment(bundle, b, cfg) for b in bounds]
    poses, scales, depths, T_c, ratios = stitch_segments(segments)
    for r in ratios:
        if abs(np.log(r)) > 0.05:
            log.warning("segments disagree on scale by a factor %.3f at an overlap frame", r)
    persons = []
    for o, seq in enumerate(bundle.persons):
        persons.append(BodySequence([bf.with_T_c(T_c[o][bf.frame_id]) for bf in seq.frames], seq.fps))
    history = [rec for s in segments for rec in s.history]
    # intrinsics: the first segment's estimate is kept (segments share one camera)
    return PipelineResult(segments[0].K, poses, scales, depths, persons, history, segments, ratios)


__all__ = [
    "PipelineResult", "SegmentBounds", "SegmentResult", "body_center_depths", "camera_from_chain",
    "chain_trajectory", "interpolate_cameras", "interpolate_log", "median_scale_baseline", "optimize_segment",
    "relative_deltas", "run_pipeline", "sample_keyframes", "split_segments", "stitch_segments",
]
