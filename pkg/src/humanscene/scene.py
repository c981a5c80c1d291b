"""Scene graph, foreground trimming and coarse similarity-alignment initialization."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateMatches, DimensionMismatch, DisconnectedGraph, ValidationError
from .geom import (
    DepthMap,
    Intrinsics,
    RigidTransform,
    TangentVector,
    log_map,
    pixel_grid,
    rays,
    retract,
    unproject,
)


@dataclass(frozen=True)
class SceneGraph:
    frames: tuple
    edges: frozenset

    def neighbors(self, i):
        return sorted({b if a == i else a for a, b in self.edges if i in (a, b)})

    def is_connected(self):
        if not self.frames:
            return True
        seen = {self.frames[0]}
        stack = [self.frames[0]]
        adj = {f: [] for f in self.frames}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        while stack:
            for n in adj[stack.pop()]:
                if n not in seen:
                    seen.add(n)
                    stack.append(n)
        return len(seen) == len(self.frames)


def canonical_edge(i, j):
    if i == j:
        raise ValidationError(f"self-edge ({i}, {i}) is not allowed")
    return (i, j) if i < j else (j, i)


def build_scene_graph(frame_count, window=1, loop_edges=()):
    if frame_count < 2:
        raise ValidationError("a scene graph needs at least two frames")
    if window < 1:
        raise ValidationError("window must be >= 1")
    edges = set()
    for i in range(frame_count):
        for k in range(1, window + 1):
            if i + k < frame_count:
                edges.add((i, i + k))
    for i, j in loop_edges:
        if not (0 <= i < frame_count and 0 <= j < frame_count):
            raise ValidationError(f"loop edge ({i}, {j}) references a missing frame")
        edges.add(canonical_edge(i, j))
    graph = SceneGraph(tuple(range(frame_count)), frozenset(edges))
    check_connected(graph)
    return graph


def check_connected(graph: SceneGraph):
    touched = {a for e in graph.edges for a in e}
    lonely = [f for f in graph.frames if f not in touched]
    if lonely:
        raise DisconnectedGraph(f"frames without any edge: {lonely}")
    if not graph.is_connected():
        raise DisconnectedGraph("scene graph has more than one component")


@dataclass(frozen=True, eq=False)
class MatchSet:
    """Pairwise correspondences for edge (i, j).

    ``point_i``/``point_j`` are camera-frame pointmap values (pre-scale) used
    only by the coarse initializer; the losses re-derive 3D points from the
    pixels and the current depth maps.
    """

    edge: tuple
    point_i: np.ndarray
    point_j: np.ndarray
    pixel_i: np.ndarray
    pixel_j: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        arrs = {}
        for name, width in (("point_i", 3), ("point_j", 3), ("pixel_i", 2), ("pixel_j", 2)):
            a = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1, width)
            arrs[name] = a
        conf = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        m = conf.shape[0]
        if any(a.shape[0] != m for a in arrs.values()):
            raise DimensionMismatch("match arrays must have one row per entry")
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValidationError("match confidence must lie in [0, 1]")
        for name, a in arrs.items():
            object.__setattr__(self, name, a)
        object.__setattr__(self, "confidence", conf)
        object.__setattr__(self, "edge", (int(self.edge[0]), int(self.edge[1])))

    def __len__(self):
        return self.confidence.shape[0]

    @classmethod
    def from_array(cls, edge, arr, clamp=False):
        arr = np.asarray(arr, dtype=np.float64).reshape(-1, 11)
        conf = arr[:, 10]
        if clamp:
            conf = np.clip(conf, 0.0, 1.0)
        return cls(edge, arr[:, 0:3], arr[:, 3:6], arr[:, 6:8], arr[:, 8:10], conf)

    def as_array(self):
        return np.concatenate(
            [self.point_i, self.point_j, self.pixel_i, self.pixel_j, self.confidence[:, None]], axis=1
        )

    def select(self, keep):
        keep = np.asarray(keep)
        return MatchSet(self.edge, self.point_i[keep], self.point_j[keep], self.pixel_i[keep],
                        self.pixel_j[keep], self.confidence[keep])

    def swapped(self):
        i, j = self.edge
        return MatchSet((j, i), self.point_j, self.point_i, self.pixel_j, self.pixel_i, self.confidence)

    def canonical(self):
        i, j = self.edge
        return self if i < j else self.swapped()


def merge_matches(match_sets):
    """Canonicalize every edge to i < j and concatenate duplicates, in input order."""
    merged = {}
    for ms in match_sets:
        ms = ms.canonical()
        if ms.edge in merged:
            prev = merged[ms.edge]
            merged[ms.edge] = MatchSet.from_array(ms.edge, np.concatenate([prev.as_array(), ms.as_array()]))
        else:
            merged[ms.edge] = ms
    return dict(sorted(merged.items()))


def nearest_pixel(pixels, shape):
    """(row, col) integer index of the pixel containing each (u, v)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    h, w = shape
    col = np.clip(np.floor(pixels[..., 0] + 0.5).astype(np.int64), 0, w - 1)
    row = np.clip(np.floor(pixels[..., 1] + 0.5).astype(np.int64), 0, h - 1)
    return row, col


def in_background(mask, pixels):
    r, c = nearest_pixel(pixels, mask.shape)
    return ~np.asarray(mask, dtype=bool)[r, c]


def trim_by_masks(matches: MatchSet, mask_i, mask_j) -> MatchSet:
    keep = in_background(mask_i, matches.pixel_i) & in_background(mask_j, matches.pixel_j)
    return matches.select(np.flatnonzero(keep))


def trim_pointmap(depth: DepthMap, mask) -> DepthMap:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != depth.shape:
        raise DimensionMismatch(f"mask {mask.shape} does not match depth {depth.shape}")
    return DepthMap(depth.values, depth.validity & ~mask)


# --- similarity alignment ------------------------------------------------

def umeyama(source, target, weights=None, with_scale=True):
    """Weighted least-squares ``target ~ s * R @ source + t``.

    Returns ``(s, R, t)``. Raises DegenerateMatches for fewer than three
    points or a collinear source set.
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    n = src.shape[0]
    if n < 3:
        raise DegenerateMatches(f"need at least 3 correspondences, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        raise DegenerateMatches("correspondence weights sum to zero")
    mu_s = w @ src / total
    mu_d = w @ dst / total
    A = src - mu_s
    B = dst - mu_d
    sv = np.linalg.svd(A * np.sqrt(w)[:, None], compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateMatches("correspondences are collinear")
    cov = (B * w[:, None]).T @ A / total
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var = (w * np.sum(A * A, axis=1)).sum() / total
        s = float(np.trace(np.diag(D) @ S) / var)
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def _edge_points(ms: MatchSet, depths, K):
    if depths is None:
        return ms.point_i, ms.point_j
    i, j = ms.edge
    out = []
    for frame, pix in ((i, ms.pixel_i), (j, ms.pixel_j)):
        d = depths[frame]
        r, c = nearest_pixel(pix, d.shape)
        out.append(rays(K, pix) * d.values[r, c][:, None])
    return out[0], out[1]


def relative_similarity(ms: MatchSet, depths=None, K=None):
    """(s, RigidTransform) mapping frame-j pointmap coordinates into frame i."""
    xi, xj = _edge_points(ms, depths, K)
    s, R, t = umeyama(xj, xi, ms.confidence)
    return s, RigidTransform(R, t)


@dataclass
class CoarseInit:
    poses: list
    scales: np.ndarray
    order: list = field(default_factory=list)


def coarse_align(graph: SceneGraph, matches: dict, depths=None, K: Intrinsics | None = None,
                 sigma0=1.0, anchor: RigidTransform | None = None) -> CoarseInit:
    """Spanning-tree similarity alignment with redundant-edge averaging.

    Frame ``graph.frames[0]`` gets ``anchor`` (identity by default) and scale
    ``sigma0``. Frames are placed in maximum-confidence spanning-tree order; each
    newly placed frame fuses the estimates from all edges to already placed
    frames by confidence-weighted averaging of tangent poses and log-scales.
    """
    check_connected(graph)
    anchor = RigidTransform.identity() if anchor is None else anchor
    by_edge = merge_matches(matches.values() if isinstance(matches, dict) else matches)
    rel = {}
    weight = {}
    for e in sorted(graph.edges):
        if e not in by_edge:
            raise DegenerateMatches(f"edge {e} has no matches")
        rel[e] = relative_similarity(by_edge[e], depths, K)
        weight[e] = float(by_edge[e].confidence.sum())

    root = graph.frames[0]
    placed = {root: (anchor, float(sigma0))}
    order = [root]
    heap = []

    def push(i):
        for n in graph.neighbors(i):
            if n not in placed:
                e = canonical_edge(i, n)
                heapq.heappush(heap, (-weight[e], e, n))

    push(root)
    while heap:
        _, _, j = heapq.heappop(heap)
        if j in placed:
            continue
        estimates = []
        for i in graph.neighbors(j):
            if i not in placed:
                continue
            e = canonical_edge(i, j)
            s, T = rel[e]
            if e[0] == j:  # stored as frame-i-from-frame-j with i=e[0]; invert
                T = _inverse_similarity(s, T)
                s = 1.0 / s
            Pi, si = placed[i]
            Tm = RigidTransform(T.rotation, si * T.translation)
            estimates.append((weight[e], Pi @ Tm, si * s))
        ref = max(estimates, key=lambda x: x[0])[1]
        wsum = sum(w for w, _, _ in estimates)
        xi = sum(w * log_map(ref, P).vector() for w, P, _ in estimates) / wsum
        log_s = sum(w * np.log(s) for w, _, s in estimates) / wsum
        placed[j] = (retract(ref, TangentVector.from_vector(xi)), float(np.exp(log_s)))
        order.append(j)
        push(j)

    poses = [placed[f][0] for f in graph.frames]
    scales = np.array([placed[f][1] for f in graph.frames])
    return CoarseInit(poses, scales, order)


def _inverse_similarity(s, T: RigidTransform):
    # x_i = s R x_j + t  =>  x_j = (1/s) R^T (x_i - t)
    Rt = T.rotation.T
    return RigidTransform(Rt, -(Rt @ T.translation) / s)


# --- point clouds -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FrameInit:
    frame_id: int
    intrinsics: Intrinsics
    depth: DepthMap
    scale: float
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != self.depth.shape:
            raise DimensionMismatch(f"frame {self.frame_id}: mask {mask.shape} vs depth {self.depth.shape}")
        if self.depth.shape != self.intrinsics.shape:
            raise DimensionMismatch(f"frame {self.frame_id}: depth {self.depth.shape} vs image {self.intrinsics.shape}")
        object.__setattr__(self, "mask", mask)

    def trimmed(self):
        return trim_pointmap(self.depth, self.mask)


def assemble_pointcloud(frames, poses, keep_stride=1, trim=True):
    if keep_stride < 1:
        raise ValidationError("keep_stride must be >= 1")
    clouds = []
    for fr, P in zip(frames, poses):
        depth = fr.trimmed() if trim else fr.depth
        pts = unproject(fr.intrinsics, P, fr.scale, depth)
        clouds.append(pts[::keep_stride])
    return np.concatenate(clouds) if clouds else np.zeros((0, 3))


def pointmap(K: Intrinsics, depth: DepthMap):
    """Camera-frame (pre-scale) 3D point per pixel, (h, w, 3)."""
    return rays(K, pixel_grid(*depth.shape)) * depth.values[..., None]
