"""Scene alignment, contact and prior losses on the joint parameter set.

Everything here is plain torch so that reverse-mode gradients and batched
finite differences (``torch.func.vmap``) share one code path. Perturbations
``xi`` are tangent-space offsets applied on top of the current parameters.
"""
from __future__ import annotations

import numpy as np
import torch

from ..errors import IndexMismatch
from .config import LossConfig
from .lie import retract, safe_norm
from .problem import DTYPE, ContactTerms, DepthLookup, Problem, ParameterSet, zero_tangent

TERMS = ("l3d", "l2d", "lc1", "lc2", "lp")


def robust(norm, delta, kind="huber"):
    """Kernel applied to residual norms."""
    if kind == "l2":
        return 0.5 * norm * norm
    if kind == "l1":
        return norm
    quad = 0.5 * norm * norm
    lin = delta * (norm - 0.5 * delta)
    return torch.where(norm <= delta, quad, lin)


def robust_kernel(r, delta=0.1, kind="huber"):
    """Scalar kernel value of a residual vector (numpy-friendly wrapper)."""
    r = torch.as_tensor(np.asarray(r, dtype=np.float64))
    return float(robust(safe_norm(r), delta, kind))


def resolve(problem: Problem, params: ParameterSet, xi):
    """Parameters with tangent perturbation ``xi`` applied (differentiable in xi).

    With ``problem.coupled_scale`` the first frame's log-scale coordinate is a
    global similarity coordinate: it also multiplies every other scale and
    stretches every other camera's offset from the first camera, i.e. a
    global similarity about the first camera. This is a depth-one kinematic
    tree: the reachable states are the same, but the slow trajectory-stretch
    mode becomes a single coordinate.
    """
    R_P, t_P = retract(params.R_P, params.t_P, xi["P"])
    R_T, t_T = retract(params.R_T, params.t_T, xi["T"])
    log_sigma = params.log_sigma + xi["sigma"]
    if problem.coupled_scale and problem.n_frames > 1:
        g = xi["sigma"][0]
        rest = torch.ones_like(log_sigma)
        rest[0] = 0.0
        log_sigma = log_sigma + g * rest
        t0 = params.t_P[0]
        stretched = t0 + torch.exp(g) * (t_P - t0)
        t_P = torch.where(rest[:, None] > 0, stretched, t_P)
    return {
        "K": params.K + xi["K"],
        "R_P": R_P,
        "t_P": t_P,
        "R_T": R_T,
        "t_T": t_T,
        "sigma": torch.exp(log_sigma),
        "log_sigma": log_sigma,
        "field": params.field + xi["depth"],
    }


def lookup_depth(lk: DepthLookup, field):
    """Depth at sub-pixel locations: inverse-depth bilinear over corrected corners."""
    if len(lk) == 0:
        return torch.zeros(0, dtype=DTYPE)
    flat = field.reshape(field.shape[0], -1)
    lo = flat[lk.frame[:, None, None], lk.lo_index]  # (M, 4, 4)
    corr = (lo * lk.lo_weight).sum(-1)
    z = lk.z0 * torch.exp(corr)
    return 1.0 / (lk.weight / z).sum(-1)


def sample_depth(problem: Problem, frame, uv, field):
    """Differentiable inverse-depth bilinear lookup at sub-pixel ``uv``.

    Returns (depth, ok); ``ok`` is False where any of the four corners is
    outside the image or not valid background.
    """
    Z0, bg, A_r, A_c = problem.dense
    H, W = Z0.shape[1], Z0.shape[2]
    u, v = uv[:, 0], uv[:, 1]
    c0 = torch.floor(u.detach()).long()
    r0 = torch.floor(v.detach()).long()
    inside = (c0 >= 0) & (c0 <= W - 2) & (r0 >= 0) & (r0 <= H - 2)
    c0 = c0.clamp(0, W - 2)
    r0 = r0.clamp(0, H - 2)
    a, b = u - c0, v - r0
    rows = torch.stack([r0, r0, r0 + 1, r0 + 1], 1)
    cols = torch.stack([c0, c0 + 1, c0, c0 + 1], 1)
    w = torch.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], 1)
    f4 = frame[:, None]
    good = bg[f4, rows, cols]
    ok = inside & good.all(1)
    corr = torch.einsum("mkh,mhw,mkw->mk", A_r[rows], field[frame], A_c[cols])
    z = torch.where(good, Z0[f4, rows, cols] * torch.exp(corr), torch.ones_like(corr))
    return 1.0 / (w / z).sum(-1), ok


def nearest_background_depth(problem: Problem, frame, uv, field):
    """Depth and pixel of the valid background pixel closest to ``uv`` (piecewise constant in uv)."""
    Z0, _, A_r, A_c = problem.dense
    H, W = Z0.shape[1], Z0.shape[2]
    ri = torch.floor(uv[:, 1].detach() + 0.5).long().clamp(0, H - 1)
    ci = torch.floor(uv[:, 0].detach() + 0.5).long().clamp(0, W - 1)
    near = problem.nearest_background[frame, ri, ci]
    nr, nc = near[:, 0], near[:, 1]
    corr = torch.einsum("mh,mhw,mw->m", A_r[nr], field[frame], A_c[nc])
    pix = torch.stack([nc, nr], -1).to(DTYPE)
    return Z0[frame, nr, nc] * torch.exp(corr), pix


def pixel_rays(K, pix):
    x = (pix[:, 0] - K[2]) / K[0]
    y = (pix[:, 1] - K[3]) / K[1]
    return torch.stack([x, y, torch.ones_like(x)], -1)


def _to_world(R, t, x):
    return (R @ x[..., None])[..., 0] + t


def _to_camera(R, t, x):
    return (R.transpose(-1, -2) @ (x - t)[..., None])[..., 0]


def match_points(problem: Problem, p):
    m = problem.matches
    di = lookup_depth(m.look_i, p["field"])
    dj = lookup_depth(m.look_j, p["field"])
    ci = pixel_rays(p["K"], m.pix_i) * (p["sigma"][m.fi] * di)[:, None]
    cj = pixel_rays(p["K"], m.pix_j) * (p["sigma"][m.fj] * dj)[:, None]
    xi = _to_world(p["R_P"][m.fi], p["t_P"][m.fi], ci)
    xj = _to_world(p["R_P"][m.fj], p["t_P"][m.fj], cj)
    return xi, xj


def term_3d(problem, p, cfg: LossConfig):
    if len(problem.matches) == 0:
        return torch.zeros((), dtype=DTYPE)
    xi, xj = match_points(problem, p)
    return (problem.matches.conf * robust(safe_norm(xi - xj), cfg.huber_3d, cfg.robust)).sum()


def _project(K, R, t, x):
    c = _to_camera(R, t, x)
    z = c[:, 2]
    ok = z > 1e-6
    zs = torch.where(ok, z, torch.ones_like(z))
    uv = torch.stack([K[0] * c[:, 0] / zs + K[2], K[1] * c[:, 1] / zs + K[3]], -1)
    return uv, ok


def term_2d(problem, p, cfg: LossConfig):
    """Reprojection loss and the number of entries skipped for lying behind a camera."""
    m = problem.matches
    if len(m) == 0:
        return torch.zeros((), dtype=DTYPE), torch.zeros((), dtype=torch.long)
    xi, xj = match_points(problem, p)
    total = torch.zeros((), dtype=DTYPE)
    skipped = torch.zeros((), dtype=torch.long)
    for f in (m.fi, m.fj):
        R, t = p["R_P"][f], p["t_P"][f]
        ua, oka = _project(p["K"], R, t, xi)
        ub, okb = _project(p["K"], R, t, xj)
        ok = oka & okb
        val = robust(safe_norm(ua - ub), cfg.huber_2d, cfg.robust)
        total = total + (m.conf * torch.where(ok, val, torch.zeros_like(val))).sum()
        skipped = skipped + (~ok).sum()
    return total, skipped


def _per_person(values, owner, n_persons):
    if n_persons == 0:
        return torch.zeros(0, dtype=DTYPE)
    onehot = torch.nn.functional.one_hot(owner, n_persons).to(DTYPE)
    return values @ onehot if values.shape[0] else torch.zeros(n_persons, dtype=DTYPE)


def term_contact_scale(problem, p, ct: ContactTerms, cfg: LossConfig):
    """Per-person hinge sums of body-vertex to scene-point distances.

    Both points are formed in the camera frame of their keyframe; the camera
    pose cancels exactly from the world-frame distance. With tracking on, the
    scene point is the background point nearest the vertex's current
    projection: bilinear at the projection itself when it lands on
    background (only the along-ray gap is penalized), otherwise the closest
    background pixel.
    """
    if ct.n_links == 0:
        return torch.zeros(problem.n_persons, dtype=DTYPE)
    K = p["K"]
    xh = _to_world(p["R_T"][ct.link_row], p["t_T"][ct.link_row], ct.link_vertex)
    pix = ct.link_pixel
    d = lookup_depth(ct.link_lookup, p["field"])
    if ct.track_projection:
        z = xh[:, 2]
        front = z > 1e-6
        zs = torch.where(front, z, torch.ones_like(z))
        uv = torch.stack([K[0] * xh[:, 0] / zs + K[2], K[1] * xh[:, 1] / zs + K[3]], -1)
        d_now, ok = sample_depth(problem, ct.link_frame, uv, p["field"])
        d_near, pix_near = nearest_background_depth(problem, ct.link_frame, uv, p["field"])
        # bilinear where the projection sits on background, else the closest background pixel
        pix = torch.where(front[:, None], torch.where(ok[:, None], uv, pix_near), pix)
        d = torch.where(front, torch.where(ok, d_now, d_near), d)
    xs = pixel_rays(K, pix) * (p["sigma"][ct.link_frame] * d)[:, None]
    gap = torch.clamp(safe_norm(xh - xs) - cfg.delta_c1, min=0.0)
    return _per_person(gap, ct.link_person, problem.n_persons)


def term_contact_static(problem, p, ct: ContactTerms, cfg: LossConfig):
    if ct.n_persistent == 0:
        return torch.zeros(problem.n_persons, dtype=DTYPE)

    def world(rows, frames, v):
        xc = _to_world(p["R_T"][rows], p["t_T"][rows], v)
        return _to_world(p["R_P"][frames], p["t_P"][frames], xc)

    xa = world(ct.pers_row_a, ct.pers_frame_a, ct.pers_vertex_a)
    xb = world(ct.pers_row_b, ct.pers_frame_b, ct.pers_vertex_b)
    slide = torch.clamp(safe_norm(xa - xb) - cfg.delta_c2, min=0.0)
    return _per_person(slide, ct.pers_person, problem.n_persons)


def term_prior(problem, p, cfg: LossConfig):
    if problem.n_rows == 0:
        return torch.zeros(problem.n_persons, dtype=DTYPE)
    dR = (p["R_T"] - problem.T_init_R).reshape(-1, 9)
    dt = p["t_T"] - problem.T_init_t
    if cfg.prior_rotation_weight is not None:
        dR = dR * cfg.prior_rotation_weight
    dist = safe_norm(torch.cat([dR, dt], -1))
    return _per_person(dist, problem.row_person, problem.n_persons)


def evaluate(problem: Problem, params: ParameterSet, contacts: ContactTerms, cfg: LossConfig, xi=None,
             all_terms=False):
    """Unweighted terms, per-person breakdowns and the weighted total.

    Scene terms with zero weight are skipped (reported as 0) unless
    ``all_terms`` is set.
    """
    if xi is None:
        xi = zero_tangent(problem)
    p = resolve(problem, params, xi)
    zero = torch.zeros((), dtype=DTYPE)
    l3d = term_3d(problem, p, cfg) if cfg.w_3d > 0 or all_terms else zero
    if cfg.w_2d > 0 or all_terms:
        l2d, skipped = term_2d(problem, p, cfg)
    else:
        l2d, skipped = zero, torch.zeros((), dtype=torch.long)
    lc1_p = term_contact_scale(problem, p, contacts, cfg)
    lc2_p = term_contact_static(problem, p, contacts, cfg)
    lp_p = term_prior(problem, p, cfg)
    lc1, lc2, lp = lc1_p.sum(), lc2_p.sum(), lp_p.sum()
    total = cfg.w_3d * l3d + cfg.w_2d * l2d + cfg.w_c1 * lc1 + cfg.w_c2 * lc2 + cfg.w_p * lp
    return {
        "total": total, "l3d": l3d, "l2d": l2d, "lc1": lc1, "lc2": lc2, "lp": lp,
        "lc1_person": lc1_p, "lc2_person": lc2_p, "lp_person": lp_p, "skipped_2d": skipped,
    }


def breakdown(values):
    """Plain-float view of an ``evaluate`` result."""
    out = {}
    for k, v in values.items():
        if v.ndim == 0:
            out[k] = float(v) if v.dtype.is_floating_point else int(v)
        else:
            out[k] = [float(x) for x in v]
    return out


# --- op-level wrappers ---------------------------------------------------

def loss_3d(problem, params, cfg=LossConfig()):
    return float(term_3d(problem, resolve(problem, params, zero_tangent(problem)), cfg))


def loss_2d(problem, params, cfg=LossConfig()):
    return float(term_2d(problem, resolve(problem, params, zero_tangent(problem)), cfg)[0])


def loss_contact_scale(problem, params, contacts, cfg=LossConfig()):
    return float(term_contact_scale(problem, resolve(problem, params, zero_tangent(problem)), contacts, cfg).sum())


def loss_contact_static(problem, params, contacts, cfg=LossConfig()):
    return float(term_contact_static(problem, resolve(problem, params, zero_tangent(problem)), contacts, cfg).sum())


def loss_prior(T_c, T_c_init, rotation_weight=None):
    """Sum of 4x4 Frobenius distances between matching transform lists."""
    if len(T_c) != len(T_c_init):
        raise IndexMismatch(f"{len(T_c)} transforms vs {len(T_c_init)} initial transforms")
    total = 0.0
    for a, b in zip(T_c, T_c_init):
        dR = a.rotation - b.rotation
        if rotation_weight is not None:
            dR = dR * rotation_weight
        total += float(np.sqrt(np.sum(dR**2) + np.sum((a.translation - b.translation) ** 2)))
    return total


def total_loss(problem, params, contacts, cfg=LossConfig()):
    """(weighted total, breakdown of unweighted terms)."""
    with torch.no_grad():
        vals = evaluate(problem, params, contacts, cfg, all_terms=True)
    return float(vals["total"]), breakdown(vals)
