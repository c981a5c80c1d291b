"""Human-scene contact correspondences.

For every labelled contact vertex whose projection falls on a background
pixel, the matched scene point is the trimmed (background) point whose pixel
is nearest to the vertex projection. Scene points are per-pixel, so their
projections are the pixel centers themselves.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import DepthMap, Intrinsics, RigidTransform, rays
from .human import BodyFrame


@dataclass(frozen=True)
class ContactLink:
    frame_id: int
    vertex_index: int
    scene_point: tuple
    scene_pixel: tuple
    pixel_distance: float
    person_id: str = "p0"

    @property
    def pixel_rc(self):
        u, v = self.scene_pixel
        return int(v), int(u)


@dataclass(frozen=True)
class PersistentContact:
    frame_id: int
    vertex_index: int
    person_id: str = "p0"


def _visible(mask, r, c, radius):
    h, w = mask.shape
    if radius <= 0:
        return not mask[r, c]
    r0, r1 = max(r - radius, 0), min(r + radius + 1, h)
    c0, c1 = max(c - radius, 0), min(c + radius + 1, w)
    return not np.all(mask[r0:r1, c0:c1])


def find_contacts(bf: BodyFrame, P: RigidTransform, K: Intrinsics, scene_depth: DepthMap, sigma,
                  mask, max_px=12.0, visibility_radius=0):
    """Contact links for one person-frame.

    ``scene_depth`` must already be foreground-trimmed. Ties in pixel distance
    go to the smaller camera-depth gap, then to the lower row-major index.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    idx = np.flatnonzero(bf.contact)
    if idx.size == 0:
        return []
    x_cam = bf.T_c.apply(bf.vertices[idx])
    valid = scene_depth.validity
    links = []
    reach = int(np.floor(max_px))
    for vi, xc in zip(idx, x_cam):
        z = xc[2]
        if z <= 1e-6:
            continue
        u = K.fx * xc[0] / z + K.cx
        v = K.fy * xc[1] / z + K.cy
        c = int(np.floor(u + 0.5))
        r = int(np.floor(v + 0.5))
        if not (0 <= r < h and 0 <= c < w):
            continue
        if not _visible(mask, r, c, visibility_radius):
            continue
        r0, r1 = max(r - reach - 1, 0), min(r + reach + 2, h)
        c0, c1 = max(c - reach - 1, 0), min(c + reach + 2, w)
        win = valid[r0:r1, c0:c1]
        if not win.any():
            continue
        rr, cc = np.nonzero(win)
        rr = rr + r0
        cc = cc + c0
        d2 = (cc - u) ** 2 + (rr - v) ** 2
        ok = d2 <= max_px * max_px
        if not ok.any():
            continue
        rr, cc, d2 = rr[ok], cc[ok], d2[ok]
        gap = np.abs(sigma * scene_depth.values[rr, cc] - z)
        flat = rr * w + cc
        best = np.lexsort((flat, gap, d2))[0]
        br, bc = int(rr[best]), int(cc[best])
        depth = sigma * scene_depth.values[br, bc]
        point = P.apply(rays(K, np.array([bc, br], dtype=np.float64)) * depth)
        links.append(ContactLink(bf.frame_id, int(vi), tuple(point), (bc, br), float(np.sqrt(d2[best])),
                                 bf.person_id))
    return links


def find_persistent(links_t, links_t1):
    """Vertices in contact at both t and t+1, keyed to frame t."""
    if not links_t:
        return []
    frame_id = links_t[0].frame_id
    person = links_t[0].person_id
    later = {l.vertex_index for l in links_t1}
    shared = sorted({l.vertex_index for l in links_t} & later)
    return [PersistentContact(frame_id, v, person) for v in shared]
