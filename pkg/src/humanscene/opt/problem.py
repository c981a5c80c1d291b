"""Static problem tensors and the mutable parameter set for joint optimization.

Depth is optimized as a low-resolution log-correction field per frame; the
full-resolution depth is ``Z0 * exp(upsample(field))`` with bilinear,
corner-aligned upsampling. Sub-pixel match lookups interpolate inverse depth,
which is exact on planar patches.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace
from functools import cached_property

import numpy as np
import torch
from scipy.ndimage import distance_transform_edt

from ..contact import find_contacts, find_persistent
from ..errors import IndexMismatch, ValidationError
from ..geom import DepthMap, Intrinsics, RigidTransform
from ..human import BodySequence
from ..scene import trim_pointmap

DTYPE = torch.float64


def _t(x, dtype=DTYPE):
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def upsample_weights(n_full, n_low):
    """(n_full, n_low) corner-aligned linear interpolation matrix."""
    A = np.zeros((n_full, n_low))
    if n_low == 1 or n_full == 1:
        A[:, 0] = 1.0
        return A
    x = np.arange(n_full) * (n_low - 1) / (n_full - 1)
    i0 = np.minimum(np.floor(x).astype(int), n_low - 2)
    a = x - i0
    A[np.arange(n_full), i0] = 1.0 - a
    A[np.arange(n_full), i0 + 1] += a
    return A


def low_res_shape(shape, factor):
    h, w = shape
    return (max((h - 1) // factor + 1, 1), max((w - 1) // factor + 1, 1))


@dataclass
class DepthLookup:
    frame: torch.Tensor  # (M,)
    z0: torch.Tensor  # (M, 4)
    weight: torch.Tensor  # (M, 4)
    lo_index: torch.Tensor  # (M, 4, 4) flat index into a frame's field
    lo_weight: torch.Tensor  # (M, 4, 4)

    def __len__(self):
        return self.frame.shape[0]


def build_lookup(frames, pixels, Z0, valid, A_r, A_c):
    """Inverse-depth bilinear lookup; returns (lookup, ok) where ok flags usable entries."""
    frames = np.asarray(frames, dtype=np.int64)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    _, H, W = Z0.shape
    h_lo, w_lo = A_r.shape[1], A_c.shape[1]
    u, v = pixels[:, 0], pixels[:, 1]
    c0 = np.floor(u).astype(np.int64)
    r0 = np.floor(v).astype(np.int64)
    fu, fv = u - c0, v - r0
    rows = np.stack([r0, r0, r0 + 1, r0 + 1], 1)
    cols = np.stack([c0, c0 + 1, c0, c0 + 1], 1)
    w = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], 1)
    inside = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    rows_c = np.clip(rows, 0, H - 1)
    cols_c = np.clip(cols, 0, W - 1)
    f4 = frames[:, None]
    vals = Z0[f4, rows_c, cols_c]
    good = valid[f4, rows_c, cols_c] & inside
    needed = w > 0
    ok = np.all(good | ~needed, axis=1)
    z0 = np.where(needed & good, vals, 1.0)
    w = np.where(needed & good, w, 0.0)

    def axis_pairs(A, idx):
        nz_idx = np.zeros(idx.shape + (2,), dtype=np.int64)
        nz_w = np.zeros(idx.shape + (2,))
        for k in range(A.shape[0]):
            nzi = np.flatnonzero(A[k])
            sel = idx == k
            if nzi.size == 1:
                nz_idx[sel, 0] = nzi[0]
                nz_w[sel, 0] = A[k, nzi[0]]
            else:
                nz_idx[sel] = nzi[:2]
                nz_w[sel] = A[k, nzi[:2]]
        return nz_idx, nz_w

    ri, rw = axis_pairs(A_r, rows_c)  # (M, 4, 2)
    ci, cw = axis_pairs(A_c, cols_c)
    lo_index = (ri[..., :, None] * w_lo + ci[..., None, :]).reshape(len(frames), 4, 4)
    lo_weight = (rw[..., :, None] * cw[..., None, :]).reshape(len(frames), 4, 4)
    assert h_lo * w_lo > lo_index.max(initial=0)
    lookup = DepthLookup(
        _t(frames, torch.long), _t(z0), _t(w), _t(lo_index, torch.long), _t(lo_weight)
    )
    return lookup, ok


def subset_lookup(lk: DepthLookup, keep):
    keep = torch.as_tensor(np.asarray(keep), dtype=torch.long)
    return DepthLookup(lk.frame[keep], lk.z0[keep], lk.weight[keep], lk.lo_index[keep], lk.lo_weight[keep])


@dataclass
class MatchTensors:
    fi: torch.Tensor
    fj: torch.Tensor
    pix_i: torch.Tensor
    pix_j: torch.Tensor
    conf: torch.Tensor
    look_i: DepthLookup
    look_j: DepthLookup
    dropped: int = 0

    def __len__(self):
        return self.fi.shape[0]


@dataclass
class PersonData:
    person_id: str
    rows: np.ndarray  # row indices into the stacked T_c block
    frames: np.ndarray  # problem frame index per row
    vertices: np.ndarray  # (n_rows, n, 3) body-frame posed vertices
    contact: np.ndarray  # (n_rows, n) bool
    sequence: BodySequence


@dataclass
class Problem:
    K0: Intrinsics
    frame_ids: list
    Z0: np.ndarray  # (F, H, W), invalid entries set to 1
    valid: np.ndarray  # (F, H, W)
    masks: np.ndarray  # (F, H, W)
    A_r: np.ndarray
    A_c: np.ndarray
    matches: MatchTensors
    persons: list
    T_init_R: torch.Tensor  # (R, 3, 3)
    T_init_t: torch.Tensor  # (R, 3)
    row_frame: torch.Tensor  # (R,)
    row_person: torch.Tensor  # (R,)
    coupled_scale: bool = True

    @property
    def n_frames(self):
        return len(self.frame_ids)

    @property
    def field_shape(self):
        return (self.A_r.shape[1], self.A_c.shape[1])

    @property
    def n_rows(self):
        return self.T_init_R.shape[0]

    @property
    def n_persons(self):
        return len(self.persons)

    def frame_index(self, frame_id):
        return self.frame_ids.index(frame_id)

    @cached_property
    def dense(self):
        """Torch copies of (Z0, background validity, A_r, A_c) for per-iteration lookups."""
        return _t(self.Z0), torch.as_tensor(self.valid & ~self.masks), _t(self.A_r), _t(self.A_c)

    @cached_property
    def nearest_background(self):
        """(F, H, W, 2) row/col of the closest valid background pixel to every pixel."""
        bg = self.valid & ~self.masks
        out = np.zeros(bg.shape + (2,), dtype=np.int64)
        for f in range(bg.shape[0]):
            if bg[f].any():
                _, idx = distance_transform_edt(~bg[f], return_indices=True)
                out[f] = np.moveaxis(idx, 0, -1)
            else:
                out[f] = np.moveaxis(np.indices(bg.shape[1:]), 0, -1)
        return torch.as_tensor(out)


@dataclass
class ParameterSet:
    """Current values of every optimizable quantity (torch, detached)."""

    K: torch.Tensor  # (4,) fx, fy, cx, cy
    R_P: torch.Tensor
    t_P: torch.Tensor
    R_T: torch.Tensor
    t_T: torch.Tensor
    log_sigma: torch.Tensor
    field: torch.Tensor  # (F, h, w)

    def clone(self):
        return ParameterSet(*(getattr(self, n).clone() for n in BLOCKS_ORDER))

    def max_abs_diff(self, other):
        return max(float((getattr(self, n) - getattr(other, n)).abs().max()) if getattr(self, n).numel() else 0.0
                   for n in BLOCKS_ORDER)

    @property
    def sigma(self):
        return torch.exp(self.log_sigma)

    def poses(self):
        return [RigidTransform(R.numpy(), t.numpy()) for R, t in zip(self.R_P, self.t_P)]

    def body_transforms(self):
        return [RigidTransform(R.numpy(), t.numpy()) for R, t in zip(self.R_T, self.t_T)]

    def intrinsics(self, K0: Intrinsics):
        return K0.with_vector(self.K.numpy())


BLOCKS_ORDER = ("K", "R_P", "t_P", "R_T", "t_T", "log_sigma", "field")
# tangent blocks: name -> shape function
TANGENT_BLOCKS = ("K", "P", "T", "sigma", "depth")


def tangent_shapes(problem: Problem):
    return {
        "K": (4,),
        "P": (problem.n_frames, 6),
        "T": (problem.n_rows, 6),
        "sigma": (problem.n_frames,),
        "depth": (problem.n_frames,) + problem.field_shape,
    }


def zero_tangent(problem: Problem, requires_grad=False):
    return {k: torch.zeros(s, dtype=DTYPE, requires_grad=requires_grad) for k, s in tangent_shapes(problem).items()}


def tangent_size(problem):
    return sum(int(np.prod(s)) for s in tangent_shapes(problem).values())


def unflatten_tangent(problem, x):
    out = {}
    k = 0
    for name, shape in tangent_shapes(problem).items():
        n = int(np.prod(shape))
        out[name] = x[..., k:k + n].reshape(x.shape[:-1] + shape)
        k += n
    return out


def flatten_tangent(problem, d):
    return torch.cat([d[name].reshape(-1) for name in tangent_shapes(problem)])


def build_problem(K: Intrinsics, frames, poses, matches, persons=(), depth_downsample=4, coupled_scale=True):
    """Assemble a problem over ``frames`` (FrameInit list, ordered by frame id).

    ``matches`` maps (frame_i, frame_j) ids to already-trimmed MatchSets; edges
    touching frames outside ``frames`` are ignored. ``persons`` are body
    sequences; frames absent from the problem are skipped.
    """
    frame_ids = [f.frame_id for f in frames]
    if len(poses) != len(frames):
        raise IndexMismatch("one initial pose per frame required")
    if len(set(frame_ids)) != len(frame_ids):
        raise ValidationError("duplicate frame ids")
    index = {fid: k for k, fid in enumerate(frame_ids)}
    H, W = K.height, K.width
    Z0 = np.stack([np.where(f.depth.validity, f.depth.values, 1.0) for f in frames]) if frames else np.zeros((0, H, W))
    valid = np.stack([f.depth.validity for f in frames]) if frames else np.zeros((0, H, W), bool)
    masks = np.stack([f.mask for f in frames]) if frames else np.zeros((0, H, W), bool)
    h_lo, w_lo = low_res_shape((H, W), depth_downsample)
    A_r, A_c = upsample_weights(H, h_lo), upsample_weights(W, w_lo)

    fi, fj, pi_, pj_, cf = [], [], [], [], []
    for (a, b), ms in sorted(matches.items()):
        if a not in index or b not in index or len(ms) == 0:
            continue
        fi.append(np.full(len(ms), index[a]))
        fj.append(np.full(len(ms), index[b]))
        pi_.append(ms.pixel_i)
        pj_.append(ms.pixel_j)
        cf.append(ms.confidence)
    if fi:
        fi, fj = np.concatenate(fi), np.concatenate(fj)
        pi_, pj_, cf = np.concatenate(pi_), np.concatenate(pj_), np.concatenate(cf)
    else:
        fi = fj = np.zeros(0, np.int64)
        pi_ = pj_ = np.zeros((0, 2))
        cf = np.zeros(0)
    look_i, ok_i = build_lookup(fi, pi_, Z0, valid, A_r, A_c)
    look_j, ok_j = build_lookup(fj, pj_, Z0, valid, A_r, A_c)
    keep = np.flatnonzero(ok_i & ok_j)
    mt = MatchTensors(
        _t(fi[keep], torch.long), _t(fj[keep], torch.long), _t(pi_[keep]), _t(pj_[keep]), _t(cf[keep]),
        subset_lookup(look_i, keep), subset_lookup(look_j, keep), dropped=int(len(fi) - len(keep)),
    )

    pdata = []
    R_list, t_list, row_frame, row_person = [], [], [], []
    row = 0
    for o, seq in enumerate(persons):
        bfs = [bf for bf in seq.frames if bf.frame_id in index]
        if not bfs:
            continue
        n = len(bfs)
        pdata.append(PersonData(
            seq.person_id,
            np.arange(row, row + n),
            np.array([index[bf.frame_id] for bf in bfs]),
            np.stack([bf.vertices for bf in bfs]),
            np.stack([bf.contact for bf in bfs]),
            BodySequence(bfs, seq.fps),
        ))
        for bf in bfs:
            R_list.append(bf.T_c.rotation)
            t_list.append(bf.T_c.translation)
            row_frame.append(index[bf.frame_id])
            row_person.append(len(pdata) - 1)
        row += n

    problem = Problem(
        K0=K, frame_ids=frame_ids, Z0=Z0, valid=valid, masks=masks, A_r=A_r, A_c=A_c, matches=mt,
        persons=pdata,
        T_init_R=_t(np.array(R_list).reshape(-1, 3, 3)), T_init_t=_t(np.array(t_list).reshape(-1, 3)),
        row_frame=_t(np.array(row_frame, dtype=np.int64), torch.long),
        row_person=_t(np.array(row_person, dtype=np.int64), torch.long),
        coupled_scale=coupled_scale,
    )
    params = ParameterSet(
        K=_t(K.vector()),
        R_P=_t(np.stack([p.rotation for p in poses]).reshape(-1, 3, 3)),
        t_P=_t(np.stack([p.translation for p in poses]).reshape(-1, 3)),
        R_T=problem.T_init_R.clone(),
        t_T=problem.T_init_t.clone(),
        log_sigma=_t(np.log([f.scale for f in frames])),
        field=torch.zeros((len(frames),) + (h_lo, w_lo), dtype=DTYPE),
    )
    return problem, params


# --- per-stage contact terms ---------------------------------------------

@dataclass
class ContactTerms:
    link_row: torch.Tensor
    link_frame: torch.Tensor
    link_person: torch.Tensor
    link_vertex: torch.Tensor  # (L, 3) body-frame vertex
    link_pixel: torch.Tensor  # (L, 2) scene pixel
    link_lookup: DepthLookup
    pers_row_a: torch.Tensor
    pers_row_b: torch.Tensor
    pers_frame_a: torch.Tensor
    pers_frame_b: torch.Tensor
    pers_person: torch.Tensor
    pers_vertex_a: torch.Tensor
    pers_vertex_b: torch.Tensor
    links: list = dc_field(default_factory=list)
    persistent: list = dc_field(default_factory=list)
    # scene point follows the vertex's current projection (else the stage-start pixel)
    track_projection: bool = True

    @property
    def n_links(self):
        return self.link_row.shape[0]

    @property
    def n_persistent(self):
        return self.pers_row_a.shape[0]


def current_depth(problem: Problem, params: ParameterSet, k):
    up = problem.A_r @ params.field[k].numpy() @ problem.A_c.T
    return problem.Z0[k] * np.exp(up)


def find_all_contacts(problem: Problem, params: ParameterSet, max_px=12.0, visibility_radius=0):
    K = params.intrinsics(problem.K0)
    poses = params.poses()
    bodies = params.body_transforms()
    sig = params.sigma.numpy()
    links_by_person = []
    depth_cache = {}
    for pd in problem.persons:
        per_frame = []
        for r, (row, f) in enumerate(zip(pd.rows, pd.frames)):
            if f not in depth_cache:
                depth = DepthMap(current_depth(problem, params, f), problem.valid[f])
                depth_cache[f] = trim_pointmap(depth, problem.masks[f])
            bf = pd.sequence.frames[r].with_T_c(bodies[row])
            per_frame.append(find_contacts(bf, poses[f], K, depth_cache[f], float(sig[f]), problem.masks[f],
                                           max_px=max_px, visibility_radius=visibility_radius))
        links_by_person.append(per_frame)
    return links_by_person


def build_contact_terms(problem: Problem, links_by_person, track_projection=True):
    rows, frames, persons, verts, pix = [], [], [], [], []
    pa, pb, fa, fb, pp, va, vb = [], [], [], [], [], [], []
    all_links, all_pers = [], []
    for o, (pd, per_frame) in enumerate(zip(problem.persons, links_by_person)):
        for r, links in enumerate(per_frame):
            for l in links:
                rows.append(pd.rows[r])
                frames.append(pd.frames[r])
                persons.append(o)
                verts.append(pd.vertices[r, l.vertex_index])
                pix.append(l.scene_pixel)
                all_links.append(l)
        for r in range(len(per_frame) - 1):
            # adjacency is between consecutive problem frames of this person
            if pd.frames[r + 1] != pd.frames[r] + 1:
                continue
            for pc in find_persistent(per_frame[r], per_frame[r + 1]):
                pa.append(pd.rows[r])
                pb.append(pd.rows[r + 1])
                fa.append(pd.frames[r])
                fb.append(pd.frames[r + 1])
                pp.append(o)
                va.append(pd.vertices[r, pc.vertex_index])
                vb.append(pd.vertices[r + 1, pc.vertex_index])
                all_pers.append(pc)
    pix = np.array(pix, dtype=np.float64).reshape(-1, 2)
    lookup, _ = build_lookup(np.array(frames, dtype=np.int64), pix, problem.Z0, problem.valid,
                             problem.A_r, problem.A_c)
    L = lambda x: _t(np.array(x, dtype=np.int64), torch.long)
    return ContactTerms(
        link_row=L(rows), link_frame=L(frames), link_person=L(persons),
        link_vertex=_t(np.array(verts).reshape(-1, 3)), link_pixel=_t(pix), link_lookup=lookup,
        pers_row_a=L(pa), pers_row_b=L(pb), pers_frame_a=L(fa), pers_frame_b=L(fb), pers_person=L(pp),
        pers_vertex_a=_t(np.array(va).reshape(-1, 3)), pers_vertex_b=_t(np.array(vb).reshape(-1, 3)),
        links=all_links, persistent=all_pers, track_projection=track_projection,
    )


def empty_contact_terms(problem):
    return build_contact_terms(problem, [[[] for _ in pd.rows] for pd in problem.persons])


def refresh_contacts(problem, params, max_px=12.0, visibility_radius=0, track_projection=True):
    links = find_all_contacts(problem, params, max_px, visibility_radius)
    return build_contact_terms(problem, links, track_projection)


def with_frames(problem: Problem, **kw):
    return replace(problem, **kw)
