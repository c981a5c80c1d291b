"""Per-frame body state: posed vertices in the root frame plus the local transform.

The optimizer never touches pose or shape parameters, so bodies arrive as
already-posed vertex sets. For synthetic work a small box-person template is
provided: 12 oriented boxes (96 corners) over a 24-joint skeleton.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, replace

import numpy as np

from .errors import OutOfRange, ValidationError
from .geom import RigidTransform, body_to_world, interpolate


@dataclass(frozen=True, eq=False)
class BodyFrame:
    vertices: np.ndarray
    joints: np.ndarray
    T_c: RigidTransform
    contact: np.ndarray
    person_id: str = "p0"
    frame_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64))
        object.__setattr__(self, "joints", np.asarray(self.joints, dtype=np.float64))
        object.__setattr__(self, "contact", np.asarray(self.contact, dtype=bool))

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    def with_T_c(self, T_c):
        return replace(self, T_c=T_c)


@dataclass
class BodySequence:
    frames: list
    fps: float

    @property
    def person_id(self):
        return self.frames[0].person_id if self.frames else None

    @property
    def frame_ids(self):
        return [f.frame_id for f in self.frames]

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, k):
        return self.frames[k]

    def T_c_list(self):
        return [f.T_c for f in self.frames]

    def with_T_c(self, T_cs):
        if len(T_cs) != len(self.frames):
            raise ValidationError("one local transform per frame required")
        return BodySequence([f.with_T_c(T) for f, T in zip(self.frames, T_cs)], self.fps)

    def subset(self, frame_ids):
        lookup = {f.frame_id: f for f in self.frames}
        return BodySequence([lookup[i] for i in frame_ids], self.fps)

    def by_frame(self):
        return {f.frame_id: f for f in self.frames}


def world_vertices(bf: BodyFrame, P: RigidTransform):
    return body_to_world(P, bf.T_c, bf.vertices)


def world_joints(bf: BodyFrame, P: RigidTransform):
    return body_to_world(P, bf.T_c, bf.joints)


def validate_sequence(seq: BodySequence):
    """Diagnostics for every violated sequence invariant; empty when clean."""
    problems = []
    if not seq.frames:
        return ["sequence: no frames"]
    if not seq.fps > 0:
        problems.append(f"sequence: fps must be positive, got {seq.fps}")
    ref = seq.frames[0]
    n, j = ref.vertices.shape[0], ref.joints.shape[0]
    if n < 1:
        problems.append(f"frame {ref.frame_id}: vertices: empty vertex set")
    if j < 1:
        problems.append(f"frame {ref.frame_id}: joints: empty joint set")
    prev = None
    for bf in seq.frames:
        fid = bf.frame_id
        if bf.vertices.ndim != 2 or bf.vertices.shape[1] != 3 or bf.vertices.shape[0] != n:
            problems.append(f"frame {fid}: vertices: expected ({n}, 3), got {bf.vertices.shape}")
        elif not np.all(np.isfinite(bf.vertices)):
            problems.append(f"frame {fid}: vertices: non-finite entries")
        if bf.joints.ndim != 2 or bf.joints.shape[1] != 3 or bf.joints.shape[0] != j:
            problems.append(f"frame {fid}: joints: expected ({j}, 3), got {bf.joints.shape}")
        if bf.contact.shape != (bf.vertices.shape[0],):
            problems.append(f"frame {fid}: contact: expected {bf.vertices.shape[0]} labels, got {bf.contact.shape}")
        if bf.person_id != ref.person_id:
            problems.append(f"frame {fid}: person_id: {bf.person_id!r} differs from {ref.person_id!r}")
        if not bf.T_c.is_valid():
            problems.append(f"frame {fid}: T_c: not a valid rigid transform")
        if prev is not None and fid <= prev:
            problems.append(f"frame {fid}: frame_id: not strictly increasing after {prev}")
        prev = fid
    return problems


def interpolate_poses(frame_ids, poses, t):
    """Slerp/lerp between the keyframes bracketing fractional index ``t``."""
    if t < frame_ids[0] or t > frame_ids[-1]:
        raise OutOfRange(f"t={t} outside [{frame_ids[0]}, {frame_ids[-1]}]")
    k = bisect.bisect_left(frame_ids, t)
    if frame_ids[k] == t:
        return poses[k]
    a, b = frame_ids[k - 1], frame_ids[k]
    return interpolate(poses[k - 1], poses[k], (t - a) / (b - a))


def interpolate_T_c(seq: BodySequence, t):
    return interpolate_poses(seq.frame_ids, seq.T_c_list(), t)


# --- box-person template -------------------------------------------------

JOINT_NAMES = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2", "l_ankle",
    "r_ankle", "spine3", "l_toe", "r_toe", "neck", "l_collar", "r_collar", "head",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hand", "r_hand",
)
J = {name: k for k, name in enumerate(JOINT_NAMES)}


@dataclass(frozen=True)
class _Box:
    name: str
    start: str
    end: str
    width: float
    depth: tuple  # (lo, hi) offsets along the secondary axis
    sole: bool = False


# width runs along the body's lateral axis, depth along the up or forward axis
TEMPLATE_BOXES = (
    _Box("torso", "pelvis", "neck", 0.34, (-0.11, 0.11)),
    _Box("head", "neck", "head", 0.18, (-0.10, 0.10)),
    _Box("l_thigh", "l_hip", "l_knee", 0.14, (-0.07, 0.07)),
    _Box("r_thigh", "r_hip", "r_knee", 0.14, (-0.07, 0.07)),
    _Box("l_shin", "l_knee", "l_ankle", 0.11, (-0.055, 0.055)),
    _Box("r_shin", "r_knee", "r_ankle", 0.11, (-0.055, 0.055)),
    _Box("l_foot", "l_heel", "l_toe", 0.10, (0.0, 0.08), sole=True),
    _Box("r_foot", "r_heel", "r_toe", 0.10, (0.0, 0.08), sole=True),
    _Box("l_upperarm", "l_shoulder", "l_elbow", 0.09, (-0.045, 0.045)),
    _Box("r_upperarm", "r_shoulder", "r_elbow", 0.09, (-0.045, 0.045)),
    _Box("l_forearm", "l_elbow", "l_hand", 0.08, (-0.04, 0.04)),
    _Box("r_forearm", "r_elbow", "r_hand", 0.08, (-0.04, 0.04)),
)
N_TEMPLATE_VERTICES = 8 * len(TEMPLATE_BOXES)
N_TEMPLATE_JOINTS = len(JOINT_NAMES)


def _box_index(name):
    return [b.name for b in TEMPLATE_BOXES].index(name)


def _corner_ids(box_name, s=None, beta=None):
    base = 8 * _box_index(box_name)
    out = []
    for k in range(8):
        ks, kb = k // 4, k % 2
        if (s is None or ks == s) and (beta is None or kb == beta):
            out.append(base + k)
    return out


CONTACT_GROUPS = {
    "l_sole": _corner_ids("l_foot", beta=0),
    "r_sole": _corner_ids("r_foot", beta=0),
    "l_hand": _corner_ids("l_forearm", s=1),
    "r_hand": _corner_ids("r_forearm", s=1),
}


def _box_corners(a, b, lateral, up, width, depth, sole):
    axis = b - a
    length = np.linalg.norm(axis)
    axis = axis / length if length > 0 else up
    e1 = lateral - (lateral @ axis) * axis
    if np.linalg.norm(e1) < 1e-9:
        e1 = np.cross(axis, up)
    e1 /= np.linalg.norm(e1)
    if sole:
        e2 = up - (up @ axis) * axis - (up @ e1) * e1
    else:
        e2 = np.cross(axis, e1)
    e2 /= np.linalg.norm(e2)
    corners = []
    for s in (0.0, 1.0):
        for alpha in (-width / 2, width / 2):
            for beta in depth:
                corners.append(a + s * (b - a) + alpha * e1 + beta * e2)
    return np.array(corners)


def box_person(points: dict, lateral, up):
    """Vertices (96, 3) and joints (24, 3) from named joint positions.

    ``points`` maps every name in ``JOINT_NAMES`` plus ``l_heel``/``r_heel`` to
    a 3D position (any frame); ``lateral`` points to the body's left and ``up``
    against gravity, both in the same frame.
    """
    lateral = np.asarray(lateral, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    verts = [
        _box_corners(np.asarray(points[bx.start], float), np.asarray(points[bx.end], float),
                     lateral, up, bx.width, bx.depth, bx.sole)
        for bx in TEMPLATE_BOXES
    ]
    joints = np.array([points[n] for n in JOINT_NAMES], dtype=np.float64)
    return np.concatenate(verts), joints


def box_faces(n_boxes=len(TEMPLATE_BOXES)):
    """Index groups of 8 corners, one per box (for silhouette rasterization)."""
    return [list(range(8 * k, 8 * k + 8)) for k in range(n_boxes)]


def contact_mask(groups, n=N_TEMPLATE_VERTICES):
    out = np.zeros(n, dtype=bool)
    for g in groups:
        out[CONTACT_GROUPS[g]] = True
    return out

