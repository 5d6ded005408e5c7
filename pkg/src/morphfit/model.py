"""Parametric head model: blendshapes, single-joint jaw skinning, head rotation.

Vertices are evaluated as::

    shaped  = template + S @ beta + E @ psi_exp + Y @ psi_eye
    jawed   = w * (R_jaw (shaped - pivot) + pivot) + (1 - w) * shaped
    out     = R_head @ jawed

with rotations given in axis-angle form.  A weak-perspective camera
``(s, tx, ty)`` maps rotated points to the image plane.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.spatial import ConvexHull

from . import container

N_LANDMARKS = 83
N_KEYPOINTS = 49
SMALL_ANGLE = 1e-8

#: Parameter blocks that enter the mesh, in Jacobian column order.
MESH_BLOCKS = ("beta", "psi_exp", "psi_eye", "theta_jaw", "theta_head")

MAGIC = b"MFA1"


class ShapeError(ValueError):
    """Array dimensions disagree with the model asset."""


# ---------------------------------------------------------------------------
# rotations


def _skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


_GENERATORS = _skew(np.eye(3))  # [a] -> [e_a]_x


def _rodrigues_coeffs(angle):
    """sin(t)/t and (1-cos(t))/t^2 without cancellation; Taylor values near 0."""
    small = angle < SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    half = np.sin(0.5 * safe) / safe
    b = np.where(small, 0.5, 2.0 * half * half)
    return a, b, small


def rodrigues_delta(theta) -> np.ndarray:
    """``R(theta) - I``, exactly zero at theta = 0."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta, axis=-1)
    a, b, _ = _rodrigues_coeffs(angle)
    k = _skew(theta)
    return a[..., None, None] * k + b[..., None, None] * (k @ k)


def rodrigues(theta) -> np.ndarray:
    """Rotation matrices for axis-angle vectors of shape ``(..., 3)``."""
    return np.eye(3) + rodrigues_delta(theta)


def rodrigues_grad(theta) -> np.ndarray:
    """Derivative of :func:`rodrigues`; entry ``[..., a, i, j]`` is dR_ij / dtheta_a."""
    theta = np.asarray(theta, dtype=float)
    batch = theta.shape[:-1]
    angle = np.linalg.norm(theta, axis=-1)
    a, b, small = _rodrigues_coeffs(angle)
    k = _skew(theta)
    rot = np.eye(3) + a[..., None, None] * k + b[..., None, None] * (k @ k)
    # I - R, formed without subtracting from the identity
    i_minus_r = -(a[..., None, None] * k + b[..., None, None] * (k @ k))
    sq = np.where(small, 1.0, angle * angle)

    out = np.empty(batch + (3, 3, 3))
    for ax in range(3):
        col = i_minus_r[..., :, ax]
        cross = np.cross(theta, col)
        exact = (theta[..., ax, None, None] * k + _skew(cross)) / sq[..., None, None] @ rot
        gen = _GENERATORS[ax]
        taylor = gen + 0.5 * (gen @ k + k @ gen)
        out[..., ax, :, :] = np.where(small[..., None, None], taylor, exact)
    return out


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class ModelAsset:
    template: np.ndarray
    shape_basis: np.ndarray
    expr_basis: np.ndarray
    eye_basis: np.ndarray
    jaw_weights: np.ndarray
    jaw_pivot: np.ndarray
    faces: np.ndarray
    lmk_faces: np.ndarray
    lmk_bary: np.ndarray
    kpt_faces: np.ndarray
    kpt_bary: np.ndarray
    lmk_side: np.ndarray = field(default=None)

    def __post_init__(self):
        for f in fields(self):
            arr = getattr(self, f.name)
            if arr is None and f.name == "lmk_side":
                arr = np.zeros(len(self.lmk_faces))
            int_like = f.name in ("faces", "lmk_faces", "kpt_faces", "lmk_side")
            arr = np.array(arr, dtype=np.int64 if int_like else float)
            arr.setflags(write=False)
            object.__setattr__(self, f.name, arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.template.shape[0], self.shape_basis.shape[2], self.expr_basis.shape[2])

    @property
    def n_verts(self) -> int:
        return self.template.shape[0]

    def validate(self) -> None:
        """Raise :class:`ShapeError` if any structural invariant is violated."""
        v, nb, ne = self.dims
        if v < 3 or nb < 1 or ne < 1:
            raise ShapeError(f"degenerate dims {self.dims}")
        expect = {
            "template": (v, 3),
            "shape_basis": (v, 3, nb),
            "expr_basis": (v, 3, ne),
            "eye_basis": (v, 3, 2),
            "jaw_weights": (v,),
            "jaw_pivot": (3,),
        }
        for name, shp in expect.items():
            if getattr(self, name).shape != shp:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shp}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ShapeError("faces must be F x 3")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ShapeError("face index out of range")
        if np.any(self.jaw_weights < 0) or np.any(self.jaw_weights > 1):
            raise ShapeError("jaw weights outside [0, 1]")
        for tag, fidx, bary, n in (("lmk", self.lmk_faces, self.lmk_bary, N_LANDMARKS),
                                   ("kpt", self.kpt_faces, self.kpt_bary, N_KEYPOINTS)):
            if fidx.shape != (n,) or bary.shape != (n, 3):
                raise ShapeError(f"{tag} embedding must have {n} anchors")
            if np.any((fidx < 0) | (fidx >= len(self.faces))):
                raise ShapeError(f"{tag} embedding references a missing face")
            if np.any(bary < 0) or np.any(np.abs(bary.sum(axis=1) - 1.0) > 1e-9):
                raise ShapeError(f"{tag} barycentric weights must be non-negative and sum to 1")
        if self.lmk_side.shape != (N_LANDMARKS,):
            raise ShapeError("lmk_side must have one label per landmark")
        if not all(np.all(np.isfinite(getattr(self, f.name))) for f in fields(self)):
            raise ShapeError("non-finite values in asset")

    def save(self, path) -> None:
        arrays = {f.name: getattr(self, f.name) for f in fields(self)}
        container.write(path, MAGIC, arrays, {"dims": list(self.dims)})

    @classmethod
    def load(cls, path) -> "ModelAsset":
        arrays, meta = container.read(path, MAGIC)
        missing = [f.name for f in fields(cls) if f.name not in arrays and f.name != "lmk_side"]
        if missing:
            raise container.ContainerError(f"asset is missing arrays: {missing}")
        asset = cls(**{f.name: arrays.get(f.name) for f in fields(cls)})
        if list(asset.dims) != list(meta.get("dims", asset.dims)):
            raise container.ContainerError(f"header dims {meta.get('dims')} disagree with arrays {asset.dims}")
        asset.validate()
        return asset


@dataclass
class ParamVector:
    beta: np.ndarray
    psi_exp: np.ndarray
    psi_eye: np.ndarray = field(default_factory=lambda: np.zeros(2))
    theta_jaw: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta_head: np.ndarray = field(default_factory=lambda: np.zeros(3))
    cam: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.array(getattr(self, f.name), dtype=float).reshape(-1))
        for name, n in (("psi_eye", 2), ("theta_jaw", 3), ("theta_head", 3), ("cam", 3)):
            if getattr(self, name).shape != (n,):
                raise ShapeError(f"{name} must have {n} entries")

    @classmethod
    def zeros(cls, n_beta: int, n_expr: int) -> "ParamVector":
        return cls(beta=np.zeros(n_beta), psi_exp=np.zeros(n_expr))

    @classmethod
    def for_asset(cls, asset: ModelAsset) -> "ParamVector":
        return cls.zeros(asset.dims[1], asset.dims[2])

    @property
    def dims(self) -> tuple[int, int]:
        return (len(self.beta), len(self.psi_exp))

    def copy(self) -> "ParamVector":
        return replace(self, **{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def mesh_vector(self, blocks=MESH_BLOCKS) -> np.ndarray:
        return np.concatenate([getattr(self, b) for b in blocks])

    def with_mesh_vector(self, vec, blocks=MESH_BLOCKS) -> "ParamVector":
        out = self.copy()
        i = 0
        for b in blocks:
            n = len(getattr(out, b))
            setattr(out, b, np.array(vec[i:i + n], dtype=float))
            i += n
        if i != len(vec):
            raise ShapeError(f"vector length {len(vec)} does not match blocks ({i})")
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, f.name))) for f in fields(self))


def _check(asset: ModelAsset, params: ParamVector) -> None:
    if params.dims != asset.dims[1:]:
        raise ShapeError(f"params dims {params.dims} do not match asset dims {asset.dims[1:]}")


# ---------------------------------------------------------------------------
# forward model


def _shaped(asset, params):
    return (asset.template + asset.shape_basis @ params.beta + asset.expr_basis @ params.psi_exp
            + asset.eye_basis @ params.psi_eye)


def _articulate(asset, shaped, delta_jaw):
    # w * (R (x - p) + p) + (1 - w) * x  ==  x + w * (R - I)(x - p)
    return shaped + asset.jaw_weights[:, None] * ((shaped - asset.jaw_pivot) @ delta_jaw.T)


def forward(asset: ModelAsset, params: ParamVector) -> np.ndarray:
    """Posed vertices (V x 3, mm)."""
    _check(asset, params)
    shaped = _shaped(asset, params)
    jawed = _articulate(asset, shaped, rodrigues_delta(params.theta_jaw))
    return jawed @ rodrigues(params.theta_head).T


def forward_jacobian(asset: ModelAsset, params: ParamVector) -> dict[str, np.ndarray]:
    """Analytic d(vertices)/d(block) for each block in :data:`MESH_BLOCKS`.

    Every block has shape ``(V, 3, n_block)``.
    """
    _check(asset, params)
    r_jaw = rodrigues(params.theta_jaw)
    r_head = rodrigues(params.theta_head)
    shaped = _shaped(asset, params)
    jawed = _articulate(asset, shaped, r_jaw - np.eye(3))
    w = asset.jaw_weights

    # per-vertex linear map applied to a rest-space displacement
    blend = w[:, None, None] * r_jaw + (1.0 - w)[:, None, None] * np.eye(3)
    lin = np.einsum("ij,vjk->vik", r_head, blend)
    jac = {
        "beta": np.einsum("vij,vjk->vik", lin, asset.shape_basis),
        "psi_exp": np.einsum("vij,vjk->vik", lin, asset.expr_basis),
        "psi_eye": np.einsum("vij,vjk->vik", lin, asset.eye_basis),
    }
    d_jaw = rodrigues_grad(params.theta_jaw)  # (3, 3, 3)
    local = shaped - asset.jaw_pivot
    # d jawed / d theta_jaw[a] = w * dR_a @ local
    dj = np.einsum("aij,vj->via", d_jaw, local) * w[:, None, None]
    jac["theta_jaw"] = np.einsum("ij,vja->via", r_head, dj)
    d_head = rodrigues_grad(params.theta_head)
    jac["theta_head"] = np.einsum("aij,vj->via", d_head, jawed)
    return jac


def stack_jacobian(jac: dict[str, np.ndarray], blocks=MESH_BLOCKS) -> np.ndarray:
    return np.concatenate([jac[b] for b in blocks], axis=2)


def project(params: ParamVector, points3d) -> np.ndarray:
    """Weak-perspective projection ``s * (x, y) + (tx, ty)``."""
    s, tx, ty = params.cam
    if not s > 0:
        raise ValueError(f"camera scale must be positive, got {s}")
    pts = np.asarray(points3d, dtype=float)
    return s * pts[..., :2] + np.array([tx, ty])


def embed_points(vertices, faces, face_idx, bary) -> np.ndarray:
    tri = np.asarray(vertices)[np.asarray(faces)[face_idx]]  # (n, 3, 3)
    return np.einsum("nk,nkd->nd", bary, tri)


def embed_landmarks(asset: ModelAsset, vertices) -> np.ndarray:
    return embed_points(vertices, asset.faces, asset.lmk_faces, asset.lmk_bary)


def embed_keypoints(asset: ModelAsset, vertices) -> np.ndarray:
    return embed_points(vertices, asset.faces, asset.kpt_faces, asset.kpt_bary)


def embedding_matrix(asset: ModelAsset, face_idx, bary) -> np.ndarray:
    """Dense (n x V) matrix M such that ``M @ vertices`` gives the embedded points."""
    mat = np.zeros((len(face_idx), asset.n_verts))
    for row, (f, w) in enumerate(zip(face_idx, bary)):
        for vid, wk in zip(asset.faces[f], w):
            mat[row, vid] += wk
    return mat


def yaw_of(theta_head) -> float:
    """Rotation about the vertical axis of the head pose (radians)."""
    r = rodrigues(theta_head)
    return float(np.arctan2(r[0, 2], r[2, 2]))


# ---------------------------------------------------------------------------
# synthetic asset


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    golden = np.pi * (1.0 + 5.0 ** 0.5)
    theta = golden * i
    return np.stack([np.cos(theta) * np.sin(phi), np.cos(phi), np.sin(theta) * np.sin(phi)], axis=1)


def _smooth(field_, neighbours, iters):
    for _ in range(iters):
        field_ = 0.5 * field_ + 0.5 * np.stack([field_[nb].mean(axis=0) for nb in neighbours])
    return field_


def _normalise_basis(basis):
    rms = np.sqrt((basis ** 2).sum(axis=1).mean(axis=0))
    return basis / np.where(rms > 0, rms, 1.0)


def synth_model(seed: int, dims: tuple[int, int, int], radius: float = 100.0) -> ModelAsset:
    """Build a deterministic, license-free head-like asset.

    The template is a bumpy sphere (nose, brow and seeded low-frequency bumps),
    bases are smoothed Gaussian fields with roughly 1 mm RMS displacement per
    unit coefficient, and the jaw weights ramp up over the lower third.
    """
    n_verts, n_beta, n_expr = (int(d) for d in dims)
    if n_verts < 12 or n_beta < 1 or n_expr < 1:
        raise ValueError(f"degenerate dims {dims}: need V >= 12 and positive basis sizes")
    rng = np.random.default_rng(seed)

    dirs = _fibonacci_sphere(n_verts)
    bumps = rng.normal(size=(6, 3))
    bumps /= np.linalg.norm(bumps, axis=1, keepdims=True)
    amps = rng.normal(0.0, 0.03, size=6)
    r = 1.0 + 0.12 * np.exp(-((dirs - [0.0, -0.05, 1.0]) ** 2).sum(1) / 0.04)   # nose
    r += 0.04 * np.exp(-((dirs - [0.0, 0.35, 0.93]) ** 2).sum(1) / 0.08)        # brow
    r += (amps * np.exp(-((dirs[:, None, :] - bumps[None]) ** 2).sum(2) / 0.3)).sum(1)
    template = radius * dirs * r[:, None]

    hull = ConvexHull(dirs)
    faces = hull.simplices.astype(np.int64)
    # orient outward
    tri = dirs[faces]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = (normal * tri.mean(axis=1)).sum(axis=1) < 0
    faces[flip] = faces[flip][:, ::-1]
    faces = faces[np.lexsort(faces.T[::-1])]

    neighbours = [set() for _ in range(n_verts)]
    for a, b, c in faces:
        neighbours[a].update((b, c))
        neighbours[b].update((a, c))
        neighbours[c].update((a, b))
    neighbours = [np.array(sorted(nb)) for nb in neighbours]

    front = np.clip(dirs[:, 2], 0.0, 1.0)
    shape_basis = _normalise_basis(_smooth(rng.normal(size=(n_verts, 3, n_beta)), neighbours, 4))
    expr_raw = _smooth(rng.normal(size=(n_verts, 3, n_expr)), neighbours, 3)
    expr_basis = _normalise_basis(expr_raw * (0.25 + front)[:, None, None])
    eye_basis = np.zeros((n_verts, 3, 2))
    for k, side in enumerate((-1.0, 1.0)):
        centre = np.array([0.35 * side, 0.2, 0.91])
        falloff = np.exp(-((dirs - centre) ** 2).sum(1) / 0.02)
        eye_basis[:, 1, k] = -falloff
        eye_basis[:, 2, k] = -0.3 * falloff
    eye_basis = _normalise_basis(eye_basis)

    y = dirs[:, 1]
    jaw_weights = np.clip((-1.0 / 3.0 - y) / (1.0 / 3.0), 0.0, 1.0)
    jaw_pivot = radius * np.array([0.0, -0.15, -0.2])

    # anchors live on a face-sized cap (40 degrees) around the front direction
    centroids = dirs[faces].mean(axis=1)
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    face_dir = np.array([0.0, -0.1, 1.0]) / np.hypot(0.1, 1.0)
    pool = np.flatnonzero(centroids @ face_dir > np.cos(np.radians(40.0)))
    if len(pool) == 0:
        pool = np.argsort(-(centroids @ face_dir), kind="stable")[:1]

    def anchors(n):
        fidx = rng.choice(pool, size=n, replace=len(pool) < n)
        bary = rng.dirichlet(np.ones(3), size=n)
        bary /= bary.sum(axis=1, keepdims=True)
        return fidx, bary

    lmk_faces, lmk_bary = anchors(N_LANDMARKS)
    kpt_faces, kpt_bary = anchors(N_KEYPOINTS)
    lmk_x = embed_points(template, faces, lmk_faces, lmk_bary)[:, 0]
    lmk_side = np.where(np.abs(lmk_x) < 0.05 * radius, 0, np.sign(lmk_x)).astype(np.int64)

    return ModelAsset(template=template, shape_basis=shape_basis, expr_basis=expr_basis,
                      eye_basis=eye_basis, jaw_weights=jaw_weights, jaw_pivot=jaw_pivot, faces=faces,
                      lmk_faces=lmk_faces, lmk_bary=lmk_bary, kpt_faces=kpt_faces, kpt_bary=kpt_bary,
                      lmk_side=lmk_side)


def random_params(asset: ModelAsset, rng, scale: float = 1.0, pose_scale: float = 0.1) -> ParamVector:
    """Seeded parameter draw used by the synthetic suites."""
    _, nb, ne = asset.dims
    return ParamVector(
        beta=rng.normal(0.0, scale, nb),
        psi_exp=rng.normal(0.0, scale, ne),
        psi_eye=rng.uniform(0.0, scale, 2),
        theta_jaw=rng.normal(0.0, pose_scale, 3),
        theta_head=rng.normal(0.0, pose_scale, 3),
        cam=np.array([rng.uniform(0.008, 0.012), *rng.normal(0.0, 0.05, 2)]),
    )
