"""Small hand-built problems shared by the optimizer tests."""
import numpy as np
import torch

from humanscene.geom import DepthMap, Intrinsics, RigidTransform, rays, so3_exp
from humanscene.human import BodyFrame, BodySequence
from humanscene.opt.losses import resolve
from humanscene.opt.optimizer import apply_tangent
from humanscene.opt.problem import build_problem, refresh_contacts, tangent_shapes, zero_tangent
from humanscene.scene import FrameInit, MatchSet

TINY_K = Intrinsics(40.0, 40.0, 15.5, 11.5, 32, 24)


def tiny_problem(seed=0, n_frames=3, n_persons=1, n_matches=30, downsample=4, track_projection=True):
    """Random scene of ``n_frames`` consecutive keyframes with walkers standing on it.

    Returns (problem, params, contacts). Every person has contact-labelled
    vertices placed near the scene surface, some of them just inside the
    human mask so the nearest-background fallback is exercised.
    """
    rng = np.random.default_rng(seed)
    K = TINY_K
    H, W = K.height, K.width
    v, u = np.mgrid[0:H, 0:W]
    frames, poses = [], []
    for f in range(n_frames):
        a, b = rng.uniform(0.2, 0.6, size=2)
        z = 2.5 + a * np.sin(u / 7.0 + f) + b * np.cos(v / 5.0)
        valid = rng.random((H, W)) > 0.05
        mask = np.zeros((H, W), bool)
        mask[6:16, 12 + f:19 + f] = True
        frames.append(FrameInit(f, K, DepthMap(z, valid), float(rng.uniform(0.8, 1.2)), mask))
        poses.append(RigidTransform(so3_exp(rng.normal(size=3) * 0.03), rng.normal(size=3) * 0.1))
    matches = {}
    for i in range(n_frames):
        for j in range(i + 1, n_frames):
            pi = rng.uniform([1, 1], [W - 2, H - 2], size=(n_matches, 2))
            pj = np.clip(pi + rng.normal(size=(n_matches, 2)), 1, [W - 2, H - 2])
            matches[(i, j)] = MatchSet((i, j), np.ones((n_matches, 3)), np.ones((n_matches, 3)), pi, pj,
                                       rng.uniform(0.2, 1.0, n_matches))
    persons = []
    for o in range(n_persons):
        n_v = 12
        base = rng.uniform([2, 2], [W - 3, H - 3], size=(n_v, 2))
        base[:3] = [[12.6 + 0.3 * k, 7.4 + 2.1 * k] for k in range(3)]  # just inside the mask edge
        contact = rng.random(n_v) > 0.25
        contact[:3] = True
        seq = []
        for f, fr in enumerate(frames):
            pix = base + rng.normal(size=base.shape) * 0.2
            r, c = np.clip(np.round(pix[:, 1]).astype(int), 0, H - 1), np.clip(np.round(pix[:, 0]).astype(int), 0, W - 1)
            depth = fr.scale * fr.depth.values[r, c] * rng.uniform(0.9, 1.1, n_v)
            x_cam = rays(K, pix) * depth[:, None]
            T_c = RigidTransform(so3_exp(rng.normal(size=3) * 0.1), x_cam.mean(0))
            verts = T_c.inverse().apply(x_cam)
            seq.append(BodyFrame(verts, verts[:4], T_c, contact, f"p{o}", f))
        persons.append(BodySequence(seq, 10.0))
    problem, params = build_problem(K, frames, poses, matches, persons, depth_downsample=downsample)
    contacts = refresh_contacts(problem, params, max_px=12.0, visibility_radius=2, track_projection=track_projection)
    return problem, params, contacts


def random_state(problem, params, rng, scale=0.02):
    """Params moved by a random tangent step in every block (away from kinks at the initial state)."""
    delta = {}
    for name, shape in tangent_shapes(problem).items():
        step = rng.normal(size=shape) * scale
        if name == "K":
            step = step * 20.0
        delta[name] = torch.as_tensor(step, dtype=torch.float64)
    return apply_tangent(problem, params, delta)


def grid_clearance(problem, params, contacts):
    """Smallest distance (px) from a tracked contact projection to a half-pixel grid line.

    The depth lookup is piecewise smooth: bilinear weights kink on integer
    pixel lines and the nearest-background rounding switches on half-integer
    lines. Central differences are only meaningful away from those lines.
    """
    if contacts.n_links == 0 or not contacts.track_projection:
        return np.inf
    p = resolve(problem, params, zero_tangent(problem))
    x = p["R_T"][contacts.link_row] @ contacts.link_vertex[..., None]
    x = (x[..., 0] + p["t_T"][contacts.link_row]).numpy()
    K = p["K"].numpy()
    front = x[:, 2] > 1e-6
    uv = np.stack([K[0] * x[front, 0] / x[front, 2] + K[2], K[1] * x[front, 1] / x[front, 2] + K[3]], -1)
    if uv.size == 0:
        return np.inf
    return float(np.min(np.abs(2 * uv - np.round(2 * uv))) / 2)


def _same_seq(a, b):
    return len(a.frames) == len(b.frames) and a.fps == b.fps and all(
        x.frame_id == y.frame_id and x.person_id == y.person_id
        and np.array_equal(x.vertices, y.vertices) and np.array_equal(x.joints, y.joints)
        and np.array_equal(x.contact, y.contact) and np.array_equal(x.T_c.matrix(), y.T_c.matrix())
        for x, y in zip(a.frames, b.frames))


def bundles_identical(a, b):
    """Bitwise equality of every array and scalar in two bundles."""
    if a.fps != b.fps or a.K != b.K or a.frame_count != b.frame_count:
        return False
    for x, y in zip(a.frames, b.frames):
        if not (x.frame_id == y.frame_id and x.scale == y.scale and np.array_equal(x.mask, y.mask)
                and np.array_equal(x.depth.values, y.depth.values)
                and np.array_equal(x.depth.validity, y.depth.validity)):
            return False
    if (a.poses is None) != (b.poses is None):
        return False
    if a.poses is not None and not all(np.array_equal(p.matrix(), q.matrix()) for p, q in zip(a.poses, b.poses)):
        return False
    if sorted(a.matches) != sorted(b.matches) or not all(
            np.array_equal(a.matches[k].as_array(), b.matches[k].as_array()) for k in a.matches):
        return False
    if len(a.persons) != len(b.persons) or not all(_same_seq(p, q) for p, q in zip(a.persons, b.persons)):
        return False
    ga, gb = a.ground_truth, b.ground_truth
    if (ga is None) != (gb is None):
        return False
    if ga is not None:
        if ga.has_scene != gb.has_scene:
            return False
        if ga.has_scene and not (
                all(np.array_equal(p.matrix(), q.matrix()) for p, q in zip(ga.poses, gb.poses))
                and np.array_equal(ga.scales, gb.scales)
                and all(np.array_equal(x.values, y.values) and np.array_equal(x.validity, y.validity)
                        for x, y in zip(ga.depths, gb.depths))):
            return False
        if len(ga.persons) != len(gb.persons) or not all(_same_seq(p, q) for p, q in zip(ga.persons, gb.persons)):
            return False
    return True
