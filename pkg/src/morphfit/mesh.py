"""Triangle meshes: OBJ/PLY IO, bounding-volume hierarchy, closest-point queries."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

LEAF_SIZE = 8
MAX_DEPTH = 200


class MeshParseError(ValueError):
    """Malformed mesh file; the message carries the line number or byte offset."""


class UnsupportedPlyElement(MeshParseError):
    def __init__(self, element: str):
        super().__init__(f"unsupported PLY element {element!r}")
        self.element = element


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if np.isnan(self.vertices).any():
            raise ValueError("NaN vertex coordinates")

    def sample_surface(self, n: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Area-weighted uniform surface samples: ``(points, face_idx, barycentric)``."""
        tri = self.vertices[self.faces]
        area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        fidx = rng.choice(len(self.faces), size=n, p=area / area.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
        return np.einsum("nk,nkd->nd", bary, tri[fidx]), fidx, bary


# ---------------------------------------------------------------------------
# OBJ


def read_obj(path) -> Mesh:
    verts, faces = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "v":
            try:
                verts.append([float(x) for x in parts[1:4]])
            except ValueError as exc:
                raise MeshParseError(f"{path}:{lineno}: bad vertex record: {exc}") from None
            if len(verts[-1]) != 3:
                raise MeshParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
        elif tag == "f":
            try:
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            except ValueError:
                raise MeshParseError(f"{path}:{lineno}: bad face record") from None
            if len(idx) < 3:
                raise MeshParseError(f"{path}:{lineno}: face needs at least 3 vertices")
            n = len(verts)
            resolved = []
            for i in idx:
                j = i - 1 if i > 0 else n + i
                if i == 0 or not 0 <= j < n:
                    raise MeshParseError(f"{path}:{lineno}: vertex index {i} out of range (have {n})")
                resolved.append(j)
            for k in range(1, len(resolved) - 1):
                faces.append([resolved[0], resolved[k], resolved[k + 1]])
    return Mesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(mesh: Mesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_SKIPPABLE = {"face"}


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshParseError("not a PLY file (missing 'ply' magic or 'end_header')")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    fmt = None
    elements = []  # [name, count, [(name, type) | (name, ('list', ctype, itype))]]
    for lineno, line in enumerate(data[:end].decode("ascii", "replace").splitlines(), start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise MeshParseError(f"header line {lineno}: property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", _ply_type(tok[2], lineno), _ply_type(tok[3], lineno))))
            else:
                elements[-1][2].append((tok[2], _ply_type(tok[1], lineno)))
        else:
            raise MeshParseError(f"header line {lineno}: unexpected keyword {tok[0]!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshParseError(f"unsupported PLY format {fmt!r}")
    for name, _, _ in elements:
        if name != "vertex" and name not in _SKIPPABLE:
            raise UnsupportedPlyElement(name)
    return fmt, elements, body_start


def _ply_type(name, lineno):
    try:
        return _PLY_TYPES[name]
    except KeyError:
        raise MeshParseError(f"header line {lineno}: unknown property type {name!r}") from None


def read_ply_points(path) -> np.ndarray:
    """Vertex positions (M x 3) from an ascii or binary little-endian PLY."""
    data = Path(path).read_bytes()
    fmt, elements, pos = _parse_ply_header(data)
    points = None
    if fmt == "ascii":
        lines = data[pos:].decode("ascii", "replace").splitlines()
        header_lines = data[:pos].count(b"\n")
        cursor = 0
        for name, count, props in elements:
            if name == "vertex":
                names = [p[0] for p in props]
                if any(isinstance(p[1], tuple) for p in props) or not {"x", "y", "z"} <= set(names):
                    raise MeshParseError("vertex element needs scalar x, y, z properties")
                cols = [names.index(c) for c in "xyz"]
                points = np.empty((count, 3))
                for i in range(count):
                    if cursor + i >= len(lines):
                        raise MeshParseError(f"line {header_lines + cursor + i + 1}: unexpected end of file")
                    tok = lines[cursor + i].split()
                    try:
                        points[i] = [float(tok[c]) for c in cols]
                    except (ValueError, IndexError):
                        raise MeshParseError(f"line {header_lines + cursor + i + 1}: bad vertex record") from None
            cursor += count
    else:
        for name, count, props in elements:
            if name == "vertex":
                if any(isinstance(p[1], tuple) for p in props):
                    raise MeshParseError("list properties on vertex element are not supported")
                dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
                if not {"x", "y", "z"} <= set(dtype.names):
                    raise MeshParseError("vertex element needs x, y, z properties")
                nbytes = dtype.itemsize * count
                if pos + nbytes > len(data):
                    raise MeshParseError(f"byte {len(data)}: vertex data truncated (need {pos + nbytes})")
                rec = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
                points = np.stack([rec[c].astype(float) for c in "xyz"], axis=1)
                pos += nbytes
            else:
                pos = _skip_binary(data, pos, count, props)
    if points is None:
        raise MeshParseError("PLY has no vertex element")
    if not np.all(np.isfinite(points)):
        raise MeshParseError("non-finite vertex coordinates")
    return points


def _skip_binary(data, pos, count, props):
    for _ in range(count):
        for _, typ in props:
            if isinstance(typ, tuple):
                ctype = np.dtype("<" + typ[1])
                if pos + ctype.itemsize > len(data):
                    raise MeshParseError(f"byte {pos}: truncated list count")
                n = int(np.frombuffer(data, ctype, 1, pos)[0])
                pos += ctype.itemsize + n * np.dtype(typ[2]).itemsize
            else:
                pos += np.dtype(typ).itemsize
            if pos > len(data):
                raise MeshParseError(f"byte {pos}: element data truncated")
    return pos


def read_ply(path, landmarks=None):
    """Read a PLY point cloud as a :class:`~morphfit.scanprep.Scan`.

    ``landmarks`` may be an 83 x 3 array or a path to an ``x,y,z`` CSV side file.
    """
    from .scanprep import Scan, read_landmarks_csv

    lmk = read_landmarks_csv(landmarks) if isinstance(landmarks, (str, Path)) else landmarks
    return Scan(read_ply_points(path), lmk)


def write_ply(points, path, binary: bool = True) -> None:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (f"ply\nformat {fmt} 1.0\nelement vertex {len(pts)}\n"
              "property double x\nproperty double y\nproperty double z\nend_header\n").encode("ascii")
    if binary:
        body = pts.astype("<f8").tobytes()
    else:
        body = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()).encode("ascii")
    Path(path).write_bytes(header + body)


# ---------------------------------------------------------------------------
# BVH


class Bvh:
    """Axis-aligned box tree over the triangles of a mesh (median split, leaves <= 8)."""

    def __init__(self, mesh: Mesh, leaf_size: int = LEAF_SIZE):
        if len(mesh.faces) == 0:
            raise ValueError("cannot build a BVH over an empty mesh")
        self.vertices = np.ascontiguousarray(mesh.vertices, dtype=float)
        self.faces = np.ascontiguousarray(mesh.faces, dtype=np.int64)
        tri = self.vertices[self.faces]
        tmin, tmax = tri.min(axis=1), tri.max(axis=1)
        centroid = tri.mean(axis=1)

        order = np.arange(len(self.faces), dtype=np.int64)
        bmin, bmax, left, right, start, count = [], [], [], [], [], []
        # (node id, lo, hi, depth), children allocated when the parent is split
        bmin.append(None); bmax.append(None); left.append(-1); right.append(-1); start.append(0); count.append(0)
        todo = [(0, 0, len(order), 0)]
        self.depth = 0
        while todo:
            node, lo, hi, depth = todo.pop()
            self.depth = max(self.depth, depth)
            if depth > MAX_DEPTH:
                raise RuntimeError("BVH depth limit exceeded")
            ids = order[lo:hi]
            bmin[node] = tmin[ids].min(axis=0)
            bmax[node] = tmax[ids].max(axis=0)
            if hi - lo <= leaf_size:
                start[node], count[node] = lo, hi - lo
                continue
            c = centroid[ids]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            ids_sorted = ids[np.argsort(c[:, axis], kind="stable")]
            order[lo:hi] = ids_sorted
            mid = lo + (hi - lo) // 2
            kids = []
            for a, b in ((lo, mid), (mid, hi)):
                kid = len(bmin)
                bmin.append(None); bmax.append(None); left.append(-1); right.append(-1)
                start.append(0); count.append(0)
                kids.append(kid)
                todo.append((kid, a, b, depth + 1))
            left[node], right[node] = kids
        self.bmin = np.ascontiguousarray(bmin, dtype=float)
        self.bmax = np.ascontiguousarray(bmax, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.start = np.asarray(start, dtype=np.int64)
        self.count = np.asarray(count, dtype=np.int64)
        self.order = order

    @property
    def arrays(self):
        return (self.bmin, self.bmax, self.left, self.right, self.start, self.count, self.order)

    def query(self, points, backend=None):
        """Closest surface points for an (N x 3) array: ``(points, distances, face_idx)``."""
        impl = backend or kernels
        pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
        q, d2, f = impl.query(pts, self.vertices, self.faces, *self.arrays)
        return q, np.sqrt(d2), f


def nearest_point(bvh: Bvh, mesh: Mesh, query) -> tuple[np.ndarray, float, int]:
    """Closest point on ``mesh`` to a single 3-vector: ``(point, distance, face_index)``."""
    if len(mesh.faces) == 0:
        raise ValueError("empty mesh")
    q, d, f = bvh.query(np.asarray(query, dtype=float)[None])
    return q[0], float(d[0]), int(f[0])


def nearest_points(bvh: Bvh, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return bvh.query(points)
