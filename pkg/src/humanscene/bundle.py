"""On-disk bundles: a JSON manifest plus little-endian tensor blobs.

Blob layout: 8-byte magic ``HSRBLOB\\0``, 4-byte dtype code (e.g. ``f8``
space-padded), uint32 ndim, ndim uint64 dims, then row-major data.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ParseError, ShapeError, ValidationError, VersionError
from .geom import DepthMap, Intrinsics, RigidTransform
from .human import BodyFrame, BodySequence, validate_sequence
from .scene import FrameInit, MatchSet

FORMAT = "humanscene-bundle"
VERSION = 1
MAGIC = b"HSRBLOB\0"
_CODES = {"f8": np.float64, "f4": np.float32, "i8": np.int64, "i4": np.int32, "u1": np.uint8, "b1": np.bool_}


@dataclass
class GroundTruth:
    """Reference values; the scene part (poses, scales, depths) may be absent."""

    poses: list | None
    scales: np.ndarray | None
    depths: list | None  # pre-scale DepthMaps; metric depth is scales[t] * values
    persons: list = field(default_factory=list)

    @property
    def has_scene(self):
        return self.poses is not None and self.scales is not None and self.depths is not None

    def metric_depths(self):
        return [s * d.values for s, d in zip(self.scales, self.depths)]


@dataclass
class Bundle:
    fps: float
    K: Intrinsics
    frames: list  # FrameInit per frame
    poses: list | None = None  # initial camera-to-world poses, optional
    matches: dict = field(default_factory=dict)
    persons: list = field(default_factory=list)
    ground_truth: GroundTruth | None = None

    @property
    def frame_count(self):
        return len(self.frames)

    @property
    def scales(self):
        return np.array([f.scale for f in self.frames])


# --- atomic file helpers --------------------------------------------------

def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


# --- blobs ----------------------------------------------------------------

def encode_blob(arr) -> bytes:
    arr = np.asarray(arr)
    code = arr.dtype.str[1:]
    if code not in _CODES:
        raise ValidationError(f"unsupported blob dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=np.dtype(_CODES[code]).newbyteorder("<"))
    header = MAGIC + code.ljust(4).encode("ascii") + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_blob(data: bytes, name="blob"):
    if len(data) < 16 or data[:8] != MAGIC:
        raise ShapeError(f"{name}: missing blob header")
    code = data[8:12].decode("ascii", errors="replace").strip()
    if code not in _CODES:
        raise ShapeError(f"{name}: unknown dtype code {code!r}")
    (ndim,) = struct.unpack("<I", data[12:16])
    end = 16 + 8 * ndim
    if len(data) < end:
        raise ShapeError(f"{name}: truncated dims")
    shape = struct.unpack(f"<{ndim}Q", data[16:end])
    dtype = np.dtype(_CODES[code]).newbyteorder("<")
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) - end != expected:
        raise ShapeError(f"{name}: expected {expected} data bytes for shape {tuple(shape)}, found {len(data) - end}")
    arr = np.frombuffer(data, dtype=dtype, offset=end).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def write_blob(path, arr):
    atomic_write_bytes(path, encode_blob(arr))


def read_blob(path, name=None):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as err:
        raise ParseError(f"{name or path.name}: cannot read blob ({err})") from err
    return decode_blob(data, name or path.name)


# --- manifest -------------------------------------------------------------

def _pose_stack(poses):
    return np.stack([p.matrix() for p in poses]) if poses else np.zeros((0, 4, 4))


def _person_entry(root, prefix, seq: BodySequence):
    pid = seq.person_id
    entry = {"id": pid, "frames": seq.frame_ids}
    blobs = {
        "vertices": np.stack([f.vertices for f in seq.frames]),
        "joints": np.stack([f.joints for f in seq.frames]),
        "T_c": np.stack([f.T_c.matrix() for f in seq.frames]),
        "contact": np.stack([f.contact for f in seq.frames]),
    }
    for key, arr in blobs.items():
        rel = f"blobs/{prefix}{pid}_{key}.bin"
        write_blob(root / rel, arr)
        entry[key] = rel
    return entry


def save_bundle(bundle: Bundle, path):
    """Write ``bundle`` under directory ``path`` (created if needed)."""
    root = Path(path)
    (root / "blobs").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "fps": bundle.fps,
        "frame_count": bundle.frame_count,
        "intrinsics": bundle.K.to_dict(),
        "frames": [],
        "edges": [],
        "persons": [],
    }
    for fr in bundle.frames:
        t = fr.frame_id
        entry = {"id": t, "scale": fr.scale}
        for key, arr in (("depth", fr.depth.values), ("valid", fr.depth.validity), ("mask", fr.mask)):
            rel = f"blobs/{key}_{t:05d}.bin"
            write_blob(root / rel, arr)
            entry[key] = rel
        manifest["frames"].append(entry)
    if bundle.poses is not None:
        write_blob(root / "blobs/poses.bin", _pose_stack(bundle.poses))
        manifest["poses"] = "blobs/poses.bin"
    for (i, j), ms in sorted(bundle.matches.items()):
        rel = f"blobs/matches_{i:05d}_{j:05d}.bin"
        write_blob(root / rel, ms.as_array())
        manifest["edges"].append({"i": i, "j": j, "matches": rel})
    for seq in bundle.persons:
        manifest["persons"].append(_person_entry(root, "", seq))
    gt = bundle.ground_truth
    if gt is not None:
        g = {"persons": []}
        if gt.has_scene:
            g.update({"poses": "blobs/gt_poses.bin", "scales": "blobs/gt_scales.bin",
                      "depth": "blobs/gt_depth.bin", "valid": "blobs/gt_valid.bin"})
            write_blob(root / g["poses"], _pose_stack(gt.poses))
            write_blob(root / g["scales"], np.asarray(gt.scales, dtype=np.float64))
            write_blob(root / g["depth"], np.stack([d.values for d in gt.depths]))
            write_blob(root / g["valid"], np.stack([d.validity for d in gt.depths]))
        for seq in gt.persons:
            g["persons"].append(_person_entry(root, "gt_", seq))
        manifest["ground_truth"] = g
    atomic_write_text(root / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def _require(d, key, where):
    if key not in d:
        raise ParseError(f"{where}: missing field {key!r}")
    return d[key]


def _blob(root, rel, shape=None, where=""):
    arr = read_blob(root / rel, rel)
    if shape is not None:
        if arr.ndim != len(shape) or any(s is not None and a != s for a, s in zip(arr.shape, shape)):
            raise ShapeError(f"{rel}: shape {arr.shape} does not match expected {shape} ({where})")
    return arr


def _load_person(root, entry, fps, n_frames, where):
    pid = str(_require(entry, "id", where))
    ids = [int(x) for x in _require(entry, "frames", where)]
    F = len(ids)
    V = _blob(root, _require(entry, "vertices", where), (F, None, 3), f"{where}.vertices")
    n = V.shape[1]
    Jt = _blob(root, _require(entry, "joints", where), (F, None, 3), f"{where}.joints")
    T = _blob(root, _require(entry, "T_c", where), (F, 4, 4), f"{where}.T_c")
    C = _blob(root, _require(entry, "contact", where), (F, n), f"{where}.contact")
    if any(i < 0 or i >= n_frames for i in ids):
        raise ParseError(f"{where}: frame ids outside [0, {n_frames})")
    frames = [BodyFrame(V[k], Jt[k], RigidTransform.from_matrix(T[k]), C[k].astype(bool), pid, ids[k])
              for k in range(F)]
    seq = BodySequence(frames, fps)
    problems = validate_sequence(seq)
    if problems:
        raise ParseError(f"{where} ({pid}): " + "; ".join(problems))
    return seq


def load_bundle(path) -> Bundle:
    root = Path(path)
    mpath = root / "manifest.json" if root.is_dir() else root
    root = mpath.parent
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ParseError(f"{mpath}: {err}") from err
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise ParseError(f"{mpath}: not a {FORMAT} manifest")
    version = manifest.get("version")
    if version != VERSION:
        raise VersionError(f"{mpath}: unsupported version {version!r} (expected {VERSION})")
    try:
        fps = float(_require(manifest, "fps", "manifest"))
        K = Intrinsics(**_require(manifest, "intrinsics", "manifest"))
        n = int(_require(manifest, "frame_count", "manifest"))
        frames = []
        shape = (K.height, K.width)
        for k, entry in enumerate(_require(manifest, "frames", "manifest")):
            where = f"frames[{k}]"
            t = int(_require(entry, "id", where))
            depth = _blob(root, _require(entry, "depth", where), shape, f"{where}.depth")
            valid = _blob(root, _require(entry, "valid", where), shape, f"{where}.valid").astype(bool)
            mask = _blob(root, _require(entry, "mask", where), shape, f"{where}.mask").astype(bool)
            try:
                dm = DepthMap(depth, valid)
            except ValidationError as err:
                raise ParseError(f"{entry['depth']}: {err}") from err
            frames.append(FrameInit(t, K, dm, float(_require(entry, "scale", where)), mask))
        if len(frames) != n or [f.frame_id for f in frames] != list(range(n)):
            raise ParseError(f"{mpath}: frames must be listed as ids 0..{n - 1}")
        poses = None
        if "poses" in manifest:
            P = _blob(root, manifest["poses"], (n, 4, 4), "poses")
            poses = [RigidTransform.from_matrix(m) for m in P]
        matches = {}
        for k, e in enumerate(manifest.get("edges", [])):
            where = f"edges[{k}]"
            i, j = int(_require(e, "i", where)), int(_require(e, "j", where))
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ParseError(f"{where}: invalid edge ({i}, {j})")
            arr = _blob(root, _require(e, "matches", where), (None, 11), where)
            matches[(i, j)] = MatchSet.from_array((i, j), arr, clamp=True)
        persons = [_load_person(root, p, fps, n, f"persons[{k}]") for k, p in enumerate(manifest.get("persons", []))]
        gt = None
        if "ground_truth" in manifest:
            g = manifest["ground_truth"]
            gpers = [_load_person(root, p, fps, n, f"ground_truth.persons[{k}]")
                     for k, p in enumerate(g.get("persons", []))]
            gt = GroundTruth(None, None, None, gpers)
            if "poses" in g:
                P = _blob(root, g["poses"], (n, 4, 4), "ground_truth.poses")
                S = _blob(root, _require(g, "scales", "ground_truth"), (n,), "ground_truth.scales")
                D = _blob(root, _require(g, "depth", "ground_truth"), (n,) + shape, "ground_truth.depth")
                Vd = _blob(root, _require(g, "valid", "ground_truth"), (n,) + shape, "ground_truth.valid")
                gt = GroundTruth([RigidTransform.from_matrix(m) for m in P], S,
                                 [DepthMap(d, v.astype(bool)) for d, v in zip(D, Vd)], gpers)
    except (KeyError, TypeError) as err:
        raise ParseError(f"{mpath}: malformed manifest ({err})") from err
    except ValidationError as err:
        if isinstance(err, (ParseError, ShapeError, VersionError)):
            raise
        raise ParseError(f"{mpath}: {err}") from err
    return Bundle(fps, K, frames, poses, matches, persons, gt)


# --- exports --------------------------------------------------------------

def ply_text(points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property double x", "property double y", "property double z", "end_header"]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in points.tolist()]
    return "\n".join(lines) + "\n"


def write_ply(path, points):
    atomic_write_text(path, ply_text(points))


def read_ply(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise ParseError(f"{path}: not a PLY file")
    try:
        end = lines.index("end_header")
    except ValueError as err:
        raise ParseError(f"{path}: missing end_header") from err
    count = None
    for ln in lines[1:end]:
        parts = ln.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        if parts[:1] == ["format"] and parts[1] != "ascii":
            raise ParseError(f"{path}: only ASCII PLY is supported")
    if count is None:
        raise ParseError(f"{path}: no vertex element")
    body = lines[end + 1:end + 1 + count]
    if len(body) != count:
        raise ShapeError(f"{path}: expected {count} vertices, found {len(body)}")
    return np.array([[float(v) for v in ln.split()[:3]] for ln in body]).reshape(-1, 3)


def quaternion_xyzw(R):
    q = Rotation.from_matrix(np.asarray(R)).as_quat()
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def tum_text(timestamps, transforms):
    lines = []
    for ts, T in zip(timestamps, transforms):
        q = quaternion_xyzw(T.rotation)
        t = T.translation
        lines.append(" ".join(repr(float(x)) for x in (ts, *t, *q)))
    return "\n".join(lines) + ("\n" if lines else "")


def write_tum(path, timestamps, transforms):
    atomic_write_text(path, tum_text(timestamps, transforms))


def read_tum(path):
    stamps, poses = [], []
    for k, ln in enumerate(Path(path).read_text().splitlines()):
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        vals = ln.split()
        if len(vals) != 8:
            raise ParseError(f"{path}:{k + 1}: expected 8 fields, found {len(vals)}")
        v = [float(x) for x in vals]
        stamps.append(v[0])
        poses.append(RigidTransform(Rotation.from_quat(v[4:8]).as_matrix(), v[1:4]))
    return np.array(stamps), poses
