"""Analytic synthetic scenes: a box-person walking in front of a tracked camera.

World axes: x along the walking direction, y pointing down, z away from the
camera rig. The ground is the plane y = 0 and a back wall closes the room at
``wall_z``. Depth maps are ray-cast exactly against these primitives, so
inverse depth is affine in pixel coordinates on every face.

Random draws come from generators keyed by (seed, stream, frame, entity) so
any subset of frames can be regenerated independently.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .bundle import Bundle, GroundTruth
from .errors import InvalidSpec
from .geom import DepthMap, Intrinsics, RigidTransform, TangentVector, pixel_grid, rays, retract, so3_exp
from .human import CONTACT_GROUPS, N_TEMPLATE_VERTICES, BodyFrame, BodySequence, box_faces, box_person
from .scene import FrameInit, MatchSet

UP = np.array([0.0, -1.0, 0.0])
FORWARD = np.array([1.0, 0.0, 0.0])
LEFT = np.array([0.0, 0.0, 1.0])
# body root frame axes (left, up, forward) expressed in world coordinates
BODY_AXES = np.stack([LEFT, UP, FORWARD], axis=1)


def _rng(seed, stream, *keys):
    tag = zlib.crc32(stream.encode())
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag] + [int(k) for k in keys]))


# --- geometry -------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple


@dataclass(frozen=True)
class SceneGeometry:
    """Ground plane, back wall and axis-aligned boxes.

    Face ids: 0 ground, 1 wall, 2 + 6k + f for face f of box k.
    """

    wall_z: float = 3.0
    boxes: tuple = ()

    def raycast(self, origins, dirs):
        """Ray parameter and face id of the first hit; (inf, -1) when nothing is hit."""
        origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(dirs))
        dirs = np.asarray(dirs, dtype=np.float64)
        n = dirs.shape[0]
        t_best = np.full(n, np.inf)
        face = np.full(n, -1, dtype=np.int64)
        with np.errstate(divide="ignore", invalid="ignore"):
            for fid, axis, value in ((0, 1, 0.0), (1, 2, self.wall_z)):
                t = (value - origins[:, axis]) / dirs[:, axis]
                ok = np.isfinite(t) & (t > 1e-9) & (t < t_best)
                t_best = np.where(ok, t, t_best)
                face = np.where(ok, fid, face)
            for k, box in enumerate(self.boxes):
                lo, hi = np.asarray(box.lo), np.asarray(box.hi)
                t1 = (lo - origins) / dirs
                t2 = (hi - origins) / dirs
                tn = np.minimum(t1, t2)
                tf = np.maximum(t1, t2)
                tn = np.where(np.isnan(tn), -np.inf, tn)
                tf = np.where(np.isnan(tf), np.inf, tf)
                t_in = tn.max(axis=1)
                t_out = tf.min(axis=1)
                axis = tn.argmax(axis=1)
                side = (dirs[np.arange(n), axis] < 0).astype(np.int64)  # entering through the hi face
                ok = (t_in <= t_out) & (t_in > 1e-9) & (t_in < t_best)
                t_best = np.where(ok, t_in, t_best)
                face = np.where(ok, 2 + 6 * k + 2 * axis + side, face)
        return t_best, face


DEFAULT_BOXES = (
    Box((0.5, -0.8, 2.2), (1.5, 0.0, 3.0)),
    Box((4.0, -1.2, 2.0), (5.2, 0.0, 3.0)),
    Box((8.0, -0.5, 1.6), (8.8, 0.0, 2.4)),
)


# --- scenario description --------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSpec:
    n_frames: int = 100
    fps: float = 10.0
    width: int = 160
    height: int = 120
    focal: float = 120.0
    sigma_star: float = 2.0
    walk_speed: float = 1.0  # m/s
    step_period_s: float = 0.6
    n_persons: int = 1
    static_camera: bool = False
    camera_distance: float = 4.0
    camera_height: float = 1.5
    pitch_deg: float = 12.0
    yaw_amplitude_deg: float = 3.0
    wall_z: float = 3.0
    boxes: tuple = DEFAULT_BOXES
    max_edge_gap: int = 4
    matches_per_edge: int = 60
    person_spacing: tuple = (-1.6, 0.8)  # (x, z) offset between consecutive persons
    contact_groups: tuple = ("l_sole", "r_sole")

    def __post_init__(self):
        problems = []
        if self.n_frames < 1:
            problems.append("n_frames must be >= 1")
        if not self.fps > 0:
            problems.append("fps must be positive")
        if self.width < 8 or self.height < 8:
            problems.append("image must be at least 8x8")
        if not self.focal > 0:
            problems.append("focal must be positive")
        if not self.sigma_star > 0:
            problems.append("sigma_star must be positive")
        if self.n_persons < 0:
            problems.append("n_persons must be >= 0")
        if self.max_edge_gap < 1 or self.matches_per_edge < 3:
            problems.append("need max_edge_gap >= 1 and matches_per_edge >= 3")
        if not self.camera_distance > 0.5:
            problems.append("camera_distance must exceed 0.5 m")
        if not self.wall_z > 0:
            problems.append("wall_z must be positive")
        if self.step_frames < 1:
            problems.append("step_period_s must span at least one frame")
        for g in self.contact_groups:
            if g not in CONTACT_GROUPS:
                problems.append(f"unknown contact group {g!r}")
        if problems:
            raise InvalidSpec("; ".join(problems))
        boxes = tuple(b if isinstance(b, Box) else Box(tuple(b[0]), tuple(b[1])) for b in self.boxes)
        object.__setattr__(self, "boxes", boxes)

    @property
    def step_frames(self):
        return int(round(self.step_period_s * self.fps))

    def intrinsics(self):
        return Intrinsics(self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0,
                          self.width, self.height)

    def geometry(self):
        return SceneGeometry(self.wall_z, self.boxes)

    def to_dict(self):
        d = asdict(self)
        d["boxes"] = [[list(b["lo"]), list(b["hi"])] for b in d["boxes"]]
        d["person_spacing"] = list(self.person_spacing)
        d["contact_groups"] = list(self.contact_groups)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown scenario fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("person_spacing", "contact_groups"):
            if key in d:
                d[key] = tuple(d[key])
        if "boxes" in d:
            d["boxes"] = tuple(Box(tuple(lo), tuple(hi)) for lo, hi in d["boxes"])
        try:
            return cls(**d)
        except TypeError as err:
            raise InvalidSpec(str(err)) from err


@dataclass(frozen=True)
class NoiseSpec:
    depth_noise: float = 0.0  # std of log-depth perturbation
    match_noise: float = 0.0  # meters, lateral displacement of the frame-j end
    outlier_fraction: float = 0.0
    pose_noise: float = 0.0  # tangent std on every camera but the first
    sigma_init: float | None = None  # None keeps the true scale
    sigma_noise: float = 0.0  # per-frame log-scale std
    contact_flip_rate: float = 0.0
    body_noise: float = 0.0  # tangent std on each T_c
    foot_slide: float = 0.0  # meters per frame of forward drift, reset every step

    def __post_init__(self):
        for name in ("depth_noise", "match_noise", "pose_noise", "sigma_noise", "body_noise", "foot_slide"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be >= 0")
        for name in ("outlier_fraction", "contact_flip_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidSpec(f"{name} must lie in [0, 1]")
        if self.sigma_init is not None and not self.sigma_init > 0:
            raise InvalidSpec("sigma_init must be positive")



# Named initializations used by the end-to-end benchmarks.
SCALE_NOISE = NoiseSpec(sigma_init=1.0, pose_noise=0.01)  # wrong global scale, mild camera noise
SLIDE_NOISE = NoiseSpec(sigma_init=1.0, pose_noise=0.01, foot_slide=0.03)  # plus sliding feet
STANDARD_NOISE = NoiseSpec(sigma_init=1.0, pose_noise=0.01, body_noise=0.05)  # plus noisy body placement

# --- motion ---------------------------------------------------------------

def camera_pose(spec: ScenarioSpec, frame):
    t = 0.0 if spec.static_camera else frame / spec.fps
    p = np.deg2rad(spec.pitch_deg)
    pitch = np.stack([[1.0, 0.0, 0.0], [0.0, np.cos(p), -np.sin(p)], [0.0, np.sin(p), np.cos(p)]], axis=1)
    if spec.static_camera:
        yaw = 0.0
        wobble = np.zeros(3)
    else:
        yaw = np.deg2rad(spec.yaw_amplitude_deg) * np.sin(2 * np.pi * t / 4.0)
        wobble = np.array([0.0, 0.05 * np.sin(2 * np.pi * t / 3.0), 0.2 * np.sin(2 * np.pi * t / 5.0)])
    R = so3_exp(UP * -yaw) @ pitch
    center = np.array([spec.walk_speed * t - 0.3, -spec.camera_height, -spec.camera_distance]) + wobble
    return RigidTransform(R, center)


def _plant_x(spec, k, offset_frames, x0):
    """Heel x of the k-th plant of a foot whose stance starts at frame 2kS + offset."""
    S = spec.step_frames
    mid = 2 * k * S + offset_frames + S / 2.0
    return x0 + spec.walk_speed * mid / spec.fps - 0.05


def _foot(spec, frame, offset_frames, x0):
    """Heel position (world) and stance flag for one foot."""
    S = spec.step_frames
    phase = (frame - offset_frames) % (2 * S)
    k = (frame - offset_frames) // (2 * S)
    if phase <= S:
        return np.array([_plant_x(spec, k, offset_frames, x0), 0.0, 0.0]), True
    s = (phase - S) / S
    a, b = _plant_x(spec, k, offset_frames, x0), _plant_x(spec, k + 1, offset_frames, x0)
    lift = 0.08 * np.sin(np.pi * s)
    return np.array([(1 - s) * a + s * b, -lift, 0.0]), False


def body_pose(spec: ScenarioSpec, frame, person=0):
    """World joint dictionary, stance flags (left, right) and pelvis position."""
    dx, dz = spec.person_spacing
    x0, z0 = person * dx, person * dz
    t = frame / spec.fps
    S = spec.step_frames
    gait = 2 * np.pi * frame / (2 * S)
    pelvis = np.array([x0 + spec.walk_speed * t, -0.92 + 0.015 * np.cos(2 * gait), z0])
    lheel, lstance = _foot(spec, frame, 0, x0)
    rheel, rstance = _foot(spec, frame, S, x0)
    lheel[2] += z0 + 0.1
    rheel[2] += z0 - 0.1
    pts = {"pelvis": pelvis, "l_heel": lheel, "r_heel": rheel}
    for side, heel, sgn in (("l", lheel, 1.0), ("r", rheel, -1.0)):
        pts[f"{side}_hip"] = pelvis + sgn * 0.09 * LEFT - 0.02 * UP
        pts[f"{side}_toe"] = heel + 0.22 * FORWARD
        pts[f"{side}_ankle"] = heel + 0.08 * UP + 0.05 * FORWARD
        hip, ankle = pts[f"{side}_hip"], pts[f"{side}_ankle"]
        pts[f"{side}_knee"] = 0.5 * (hip + ankle) + 0.05 * FORWARD
    for name, h in (("spine1", 0.1), ("spine2", 0.25), ("spine3", 0.4), ("neck", 0.55), ("head", 0.75)):
        pts[name] = pelvis + h * UP
    swing = 0.15 * np.sin(gait)
    for side, sgn in (("l", 1.0), ("r", -1.0)):
        pts[f"{side}_collar"] = pelvis + 0.5 * UP + sgn * 0.07 * LEFT
        sh = pelvis + 0.5 * UP + sgn * 0.19 * LEFT
        pts[f"{side}_shoulder"] = sh
        arm = -sgn * swing  # arms swing opposite to the legs
        pts[f"{side}_elbow"] = sh - 0.27 * UP + 0.5 * arm * FORWARD
        pts[f"{side}_wrist"] = sh - 0.52 * UP + arm * FORWARD
        pts[f"{side}_hand"] = sh - 0.60 * UP + 1.1 * arm * FORWARD
    return pts, (lstance, rstance), pelvis


def body_frame(spec, frame, P: RigidTransform, person=0):
    """Ground-truth BodyFrame, body-to-world transform and scheduled contact vertices."""
    pts, (ls, rs), pelvis = body_pose(spec, frame, person)
    verts_w, joints_w = box_person(pts, LEFT, UP)
    T_g = RigidTransform(BODY_AXES, pelvis)
    inv = T_g.inverse()
    schedule = np.zeros(N_TEMPLATE_VERTICES, dtype=bool)
    if ls and "l_sole" in spec.contact_groups:
        schedule[CONTACT_GROUPS["l_sole"]] = True
    if rs and "r_sole" in spec.contact_groups:
        schedule[CONTACT_GROUPS["r_sole"]] = True
    bf = BodyFrame(inv.apply(verts_w), inv.apply(joints_w), P.inverse() @ T_g, schedule,
                   person_id=f"p{person}", frame_id=frame)
    return bf, T_g, schedule


# --- rendering ------------------------------------------------------------

def render_depth(geom: SceneGeometry, K: Intrinsics, P: RigidTransform):
    """Metric camera depth and face id per pixel."""
    pix = pixel_grid(K.height, K.width).reshape(-1, 2)
    dirs = rays(K, pix) @ P.rotation.T
    t, face = geom.raycast(P.translation[None], dirs)
    return t.reshape(K.shape), face.reshape(K.shape)


def silhouette(K: Intrinsics, P: RigidTransform, world_vertices, boxes_of_8):
    """Pixels whose centers fall inside the projected convex hull of any box."""
    mask = np.zeros(K.shape, dtype=bool)
    xc = P.inverse().apply(world_vertices)
    for idx in boxes_of_8:
        c = xc[idx]
        if np.any(c[:, 2] <= 1e-6):
            continue
        uv = np.stack([K.fx * c[:, 0] / c[:, 2] + K.cx, K.fy * c[:, 1] / c[:, 2] + K.cy], 1)
        try:
            hull = ConvexHull(uv)
        except QhullError:
            continue
        c0, r0 = np.maximum(np.floor(uv.min(0)).astype(int), 0)
        c1, r1 = np.minimum(np.ceil(uv.max(0)).astype(int), [K.width - 1, K.height - 1])
        if c1 < c0 or r1 < r0:
            continue
        vv, uu = np.mgrid[r0:r1 + 1, c0:c1 + 1]
        pts = np.stack([uu.ravel(), vv.ravel()], 1).astype(np.float64)
        inside = np.all(pts @ hull.equations[:, :2].T + hull.equations[:, 2] <= 1e-12, axis=1)
        mask[vv.ravel()[inside], uu.ravel()[inside]] = True
    return mask


# --- scenario -------------------------------------------------------------

@dataclass
class Scenario:
    spec: ScenarioSpec
    seed: int
    K: Intrinsics
    poses: list  # ground-truth camera-to-world
    depths: list  # pre-scale DepthMaps (metric / sigma_star)
    faces: list
    masks: list
    matches: dict
    persons: list  # ground-truth BodySequences
    body_world: list  # per person, per frame T_g
    schedule: list  # per person (n_frames, n_vertices) bool
    geometry: SceneGeometry = field(default_factory=SceneGeometry)

    @property
    def sigma_star(self):
        return self.spec.sigma_star

    @property
    def fps(self):
        return self.spec.fps

    @property
    def n_frames(self):
        return self.spec.n_frames

    def frame_inits(self, scale=None):
        s = self.sigma_star if scale is None else scale
        return [FrameInit(t, self.K, self.depths[t], s, self.masks[t]) for t in range(self.n_frames)]

    def metric_depth(self, t):
        return self.sigma_star * self.depths[t].values

    def ground_truth(self):
        return GroundTruth(
            poses=list(self.poses),
            scales=np.full(self.n_frames, self.sigma_star),
            depths=list(self.depths),
            persons=list(self.persons),
        )

    def bundle(self):
        """Ground-truth-initialized bundle carrying its own ground-truth section."""
        return Bundle(
            fps=self.fps, K=self.K, frames=self.frame_inits(), poses=list(self.poses),
            matches=dict(self.matches), persons=list(self.persons), ground_truth=self.ground_truth(),
        )


def _edge_matches(spec, K, geom, poses, depths_m, faces, masks, i, j, seed):
    H, W = K.height, K.width
    rng = _rng(seed, "matches", i, j)
    cand = np.flatnonzero((~masks[i]) & np.isfinite(depths_m[i]))
    if cand.size == 0:
        return None
    cand = rng.permutation(cand)[: 6 * spec.matches_per_edge]
    r, c = np.divmod(cand, W)
    pix_i = np.stack([c, r], 1).astype(np.float64)
    z_i = depths_m[i][r, c]
    face_i = faces[i][r, c]
    Pi, Pj = poses[i], poses[j]
    X = Pi.apply(rays(K, pix_i) * z_i[:, None])
    xc = Pj.inverse().apply(X)
    z = xc[:, 2]
    ok = z > 1e-6
    zs = np.where(ok, z, 1.0)
    u = K.fx * xc[:, 0] / zs + K.cx
    v = K.fy * xc[:, 1] / zs + K.cy
    ok &= (u >= 0) & (u < W - 1) & (v >= 0) & (v < H - 1)
    # the frame-j ray must hit the same face at the same depth
    t_hit, f_hit = geom.raycast(Pj.translation[None], (rays(K, np.stack([u, v], 1)) @ Pj.rotation.T))
    ok &= (f_hit == face_i) & (np.abs(t_hit - zs) <= 1e-6 * zs)
    uc = np.clip(np.floor(u).astype(int), 0, W - 2)
    vc = np.clip(np.floor(v).astype(int), 0, H - 2)
    for dr in (0, 1):
        for dc in (0, 1):
            ok &= faces[j][vc + dr, uc + dc] == face_i
    nr = np.clip(np.floor(v + 0.5).astype(int), 0, H - 1)
    nc = np.clip(np.floor(u + 0.5).astype(int), 0, W - 1)
    ok &= ~masks[j][nr, nc]
    keep = np.flatnonzero(ok)[: spec.matches_per_edge]
    if keep.size < 3:
        return None
    s = spec.sigma_star
    pix_j = np.stack([u, v], 1)[keep]
    point_i = rays(K, pix_i[keep]) * (z_i[keep] / s)[:, None]
    point_j = rays(K, pix_j) * (z[keep] / s)[:, None]
    return MatchSet((i, j), point_i, point_j, pix_i[keep], pix_j, np.ones(keep.size))


def generate_scenario(spec: ScenarioSpec | None = None, seed=0) -> Scenario:
    spec = spec or ScenarioSpec()
    if not isinstance(spec, ScenarioSpec):
        raise InvalidSpec("spec must be a ScenarioSpec")
    K = spec.intrinsics()
    geom = spec.geometry()
    N = spec.n_frames
    poses = [camera_pose(spec, t) for t in range(N)]
    persons, body_world, schedules = [], [], []
    for o in range(spec.n_persons):
        frames, Tg, sched = [], [], []
        for t in range(N):
            bf, T_g, s = body_frame(spec, t, poses[t], o)
            frames.append(bf)
            Tg.append(T_g)
            sched.append(s)
        persons.append(BodySequence(frames, spec.fps))
        body_world.append(Tg)
        schedules.append(np.stack(sched))

    depths_m, faces, masks, depths = [], [], [], []
    groups = box_faces()
    for t in range(N):
        z, f = render_depth(geom, K, poses[t])
        valid = np.isfinite(z) & (z > 0)
        depths_m.append(np.where(valid, z, np.inf))
        faces.append(f)
        depths.append(DepthMap(np.where(valid, z / spec.sigma_star, 0.0), valid))
        mask = np.zeros(K.shape, dtype=bool)
        for o in range(spec.n_persons):
            bf = persons[o][t]
            mask |= silhouette(K, poses[t], body_world[o][t].apply(bf.vertices), groups)
        masks.append(mask)

    matches = {}
    for i in range(N):
        for j in range(i + 1, min(i + spec.max_edge_gap, N - 1) + 1):
            ms = _edge_matches(spec, K, geom, poses, depths_m, faces, masks, i, j, seed)
            if ms is not None:
                matches[(i, j)] = ms
    return Scenario(spec, seed, K, poses, depths, faces, masks, matches, persons, body_world, schedules, geom)


# --- initialization noise -------------------------------------------------

def _noisy_pose(P, std, rng):
    if std <= 0:
        return P
    return retract(P, TangentVector.from_vector(rng.normal(0.0, std, 6)))


def perturb_initialization(scenario: Scenario, noise: NoiseSpec = NoiseSpec(), seed=0) -> Bundle:
    """Starting point for optimization derived from the ground truth.

    The initial world is the true one uniformly scaled by sigma_init/sigma*
    about the first camera, so that scene geometry, camera motion and depth
    scales are mutually consistent but metrically wrong. Bodies keep their
    metric camera-frame transforms.
    """
    spec = scenario.spec
    N = scenario.n_frames
    K = scenario.K
    sigma_init = spec.sigma_star if noise.sigma_init is None else noise.sigma_init
    ratio = sigma_init / spec.sigma_star
    c0 = scenario.poses[0].translation

    poses = []
    for t, P in enumerate(scenario.poses):
        if ratio != 1.0:
            P = RigidTransform(P.rotation, c0 + ratio * (P.translation - c0))
        if t > 0:
            P = _noisy_pose(P, noise.pose_noise, _rng(seed, "pose", t))
        poses.append(P)

    frames = []
    for t in range(N):
        d = scenario.depths[t]
        values = d.values
        if noise.depth_noise > 0:
            eps = _rng(seed, "depth", t).normal(0.0, noise.depth_noise, values.shape)
            values = np.where(d.validity, values * np.exp(eps), values)
        scale = sigma_init
        if noise.sigma_noise > 0:
            scale = sigma_init * float(np.exp(_rng(seed, "sigma", t).normal(0.0, noise.sigma_noise)))
        frames.append(FrameInit(t, K, DepthMap(values, d.validity), scale, scenario.masks[t]))

    matches = {}
    for (i, j), ms in scenario.matches.items():
        if noise.match_noise > 0 or noise.outlier_fraction > 0:
            ms = _noisy_matches(ms, scenario, frames, noise, _rng(seed, "match", i, j))
        matches[(i, j)] = ms

    persons = []
    S = spec.step_frames
    for o, seq in enumerate(scenario.persons):
        out = []
        for t, bf in enumerate(seq.frames):
            T_c = bf.T_c
            if noise.foot_slide > 0:
                # forward drift in world, growing within each step and reset at step changes
                drift = noise.foot_slide * (t % S) * FORWARD
                shift = scenario.poses[t].rotation.T @ drift
                T_c = RigidTransform(T_c.rotation, T_c.translation + shift)
            T_c = _noisy_pose(T_c, noise.body_noise, _rng(seed, "body", t, o))
            contact = bf.contact
            if noise.contact_flip_rate > 0:
                flip = _rng(seed, "flip", t, o).random(contact.shape) < noise.contact_flip_rate
                contact = contact ^ flip
            out.append(replace(bf, T_c=T_c, contact=contact))
        persons.append(BodySequence(out, seq.fps))

    return Bundle(fps=spec.fps, K=K, frames=frames, poses=poses, matches=matches, persons=persons,
                  ground_truth=scenario.ground_truth())


def _noisy_matches(ms: MatchSet, scenario, frames, noise, rng):
    K = scenario.K
    i, j = ms.edge
    pix_j = ms.pixel_j.copy()
    point_j = ms.point_j.copy()
    conf = ms.confidence.copy()
    m = len(ms)
    if noise.match_noise > 0:
        disp = rng.normal(0.0, noise.match_noise, (m, 2))
        depth = point_j[:, 2] * scenario.sigma_star
        pix_j = pix_j + disp * (K.fx / depth)[:, None]
        conf = 1.0 - 0.5 * np.minimum(1.0, np.linalg.norm(disp, axis=1) / (3.0 * noise.match_noise))
    n_out = int(round(noise.outlier_fraction * m))
    if n_out:
        sel = rng.choice(m, n_out, replace=False)
        pix_j[sel] = rng.uniform([0, 0], [K.width - 1, K.height - 1], (n_out, 2))
        conf[sel] = rng.uniform(0.3, 0.9, n_out)
    pix_j[:, 0] = np.clip(pix_j[:, 0], 0, K.width - 1 - 1e-9)
    pix_j[:, 1] = np.clip(pix_j[:, 1], 0, K.height - 1 - 1e-9)
    # refresh the frame-j pointmap values at the moved pixels (nearest depth)
    d = frames[j].depth
    r = np.floor(pix_j[:, 1] + 0.5).astype(int).clip(0, K.height - 1)
    c = np.floor(pix_j[:, 0] + 0.5).astype(int).clip(0, K.width - 1)
    z = np.where(d.validity[r, c], d.values[r, c], point_j[:, 2])
    point_j = rays(K, pix_j) * z[:, None]
    return MatchSet(ms.edge, ms.point_i, point_j, ms.pixel_i, pix_j, conf)


def contact_displacement(P_list, T_c_list, vertices, schedule, frame_ids):
    """Mean world displacement of vertices held in contact between consecutive listed frames."""
    disp = []
    for a, b in zip(frame_ids[:-1], frame_ids[1:]):
        held = np.flatnonzero(schedule[a] & schedule[b])
        if held.size == 0:
            continue
        xa = (P_list[a] @ T_c_list[a]).apply(vertices[a][held])
        xb = (P_list[b] @ T_c_list[b]).apply(vertices[b][held])
        disp.extend(np.linalg.norm(xa - xb, axis=1))
    return float(np.mean(disp)) if disp else 0.0
