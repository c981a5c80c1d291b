"""Straight-line reference metrics, written independently of the package code.

Alignment uses Horn's closed-form quaternion solution rather than an SVD,
nearest neighbours are brute force, and every average is an explicit loop.
"""
import math

import numpy as np


def horn_align(src, dst):
    """(R, t) minimizing sum |R src + t - dst|^2 via the unit-quaternion eigenproblem."""
    src = np.asarray(src, float).reshape(-1, 3)
    dst = np.asarray(dst, float).reshape(-1, 3)
    ms, md = src.mean(0), dst.mean(0)
    a, b = src - ms, dst - md
    S = a.T @ b
    Sxx, Sxy, Sxz = S[0]
    Syx, Syy, Syz = S[1]
    Szx, Szy, Szz = S[2]
    N = np.array([
        [Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx],
        [Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz],
        [Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy],
        [Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz],
    ])
    vals, vecs = np.linalg.eigh(N)
    w, x, y, z = vecs[:, np.argmax(vals)]
    R = np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])
    return R, md - R @ ms


def horn_similarity(src, dst):
    R, _ = horn_align(src, dst)
    src = np.asarray(src, float).reshape(-1, 3)
    dst = np.asarray(dst, float).reshape(-1, 3)
    a, b = src - src.mean(0), dst - dst.mean(0)
    s = sum(float(bb @ (R @ aa)) for aa, bb in zip(a, b)) / sum(float(aa @ aa) for aa in a)
    return s, R, dst.mean(0) - s * R @ src.mean(0)


def segments(n, length=100, min_tail=10):
    out = []
    start = 0
    while start < n:
        out.append([start, min(start + length, n)])
        start += length
    if len(out) > 1 and out[-1][1] - out[-1][0] < min_tail:
        last = out.pop()
        out[-1][1] = last[1]
    return out


def mpjpe(pred, gt, first_two=False):
    """Mean over 100-frame segments of the mean per-joint error, millimeters."""
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    per_segment = []
    for a, b in segments(len(pred)):
        fit = slice(a, a + 2) if first_two else slice(a, b)
        R, t = horn_align(pred[fit].reshape(-1, 3), gt[fit].reshape(-1, 3))
        errs = []
        for f in range(a, b):
            for j in range(pred.shape[1]):
                errs.append(math.dist(R @ pred[f, j] + t, gt[f, j]))
        per_segment.append(1000.0 * sum(errs) / len(errs))
    return sum(per_segment) / len(per_segment)


def rte(pred, gt):
    R, t = horn_align(pred, gt)
    err = sum(math.dist(R @ p + t, g) for p, g in zip(pred, gt)) / len(pred)
    length = sum(math.dist(gt[k], gt[k + 1]) for k in range(len(gt) - 1))
    return 100.0 * err / length


def ate(pred_centers, gt_centers, with_scale=False):
    if with_scale:
        s, R, t = horn_similarity(pred_centers, gt_centers)
    else:
        (R, t), s = horn_align(pred_centers, gt_centers), 1.0
    sq = [sum((s * (R @ p) + t - g) ** 2) for p, g in zip(pred_centers, gt_centers)]
    return math.sqrt(sum(sq) / len(sq))


def depth(pred_maps, gt_maps):
    """(AbsRel, delta<1.25) over pixels positive and finite in both."""
    rel, hits, n = 0.0, 0, 0
    for p, g in zip(pred_maps, gt_maps):
        for x, y in zip(np.ravel(p), np.ravel(g)):
            if math.isfinite(x) and math.isfinite(y) and x > 0 and y > 0:
                rel += abs(x - y) / y
                hits += max(x / y, y / x) < 1.25
                n += 1
    return rel / n, hits / n


def chamfer(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return 0.5 * (d.min(1).mean() + d.min(0).mean())
