"""Scan cleanup: landmark PCA plane, elliptical crop of the raw point cloud."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EIG_TIE = 1e-12
RADIUS_MARGIN = 1e-9  # relative growth of the enclosing radii


class DegenerateConfigurationError(ValueError):
    pass


@dataclass
class Scan:
    points: np.ndarray
    landmarks83: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("scan has non-finite coordinates")
        if self.landmarks83 is not None:
            self.landmarks83 = np.asarray(self.landmarks83, dtype=float).reshape(-1, 3)


@dataclass
class CropPlane:
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    radii: tuple[float, float] | None = None

    def project(self, points) -> np.ndarray:
        """In-plane coordinates (N x 2) of points relative to the origin."""
        rel = np.asarray(points, dtype=float).reshape(-1, 3) - self.origin
        return np.stack([rel @ self.u, rel @ self.v], axis=1)

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u, self.v)


def _canonical_sign(vec):
    k = int(np.argmax(np.abs(vec)))
    return vec if vec[k] > 0 else -vec


def fit_pca_plane(landmarks) -> CropPlane:
    """Best-fit plane through the landmarks (centroid + top-2 principal axes).

    Each axis is flipped so that its largest-magnitude component is positive.
    """
    pts = np.asarray(landmarks, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateConfigurationError(f"need at least 3 landmarks, got {len(pts)}")
    origin = pts.mean(axis=0)
    cov = (pts - origin).T @ (pts - origin) / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    scale = max(evals[0], np.finfo(float).tiny)
    if evals[1] <= 1e-12 * scale:
        raise DegenerateConfigurationError("landmarks are collinear or coincident")
    axes = [_canonical_sign(evecs[:, 0]), _canonical_sign(evecs[:, 1])]
    if abs(evals[0] - evals[1]) <= EIG_TIE * scale and tuple(axes[1]) < tuple(axes[0]):
        axes.reverse()
    return CropPlane(origin=origin, u=axes[0], v=axes[1])


def ellipse_radii(plane: CropPlane, landmarks) -> tuple[float, float]:
    """Per-axis extents ``(max|u|, max|v|)`` of the projected landmarks."""
    uv = plane.project(landmarks)
    return float(np.abs(uv[:, 0]).max()), float(np.abs(uv[:, 1]).max())


def enclosing_radii(plane: CropPlane, landmarks) -> tuple[float, float]:
    """Per-axis extents scaled uniformly until every landmark lies inside the ellipse.

    The bounding extents alone leave landmarks off both axes outside the ellipse
    (e.g. a landmark at (r_a, r_b) has normalised radius sqrt(2)).
    """
    ra, rb = ellipse_radii(plane, landmarks)
    uv = plane.project(landmarks)
    grow = np.sqrt(max(float(ellipse_value(uv, ra, rb).max()), 1.0))
    ra, rb = ra * grow, rb * grow
    while ellipse_value(uv, ra, rb).max() > 1.0:
        ra, rb = np.nextafter(ra, np.inf), np.nextafter(rb, np.inf)
    # the outermost landmark sits on the boundary; a small margin keeps it inside under
    # any re-derivation of the plane that differs by rounding
    return float(ra * (1 + RADIUS_MARGIN)), float(rb * (1 + RADIUS_MARGIN))


def ellipse_value(uv, ra, rb) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    return (uv[:, 0] / ra) ** 2 + (uv[:, 1] / rb) ** 2


def crop_scan(scan: Scan, plane: CropPlane) -> Scan:
    """Keep points whose projection satisfies ``(u/r_a)^2 + (v/r_b)^2 <= 1``."""
    if plane.radii is None:
        raise ValueError("plane has no radii; call ellipse_radii first")
    ra, rb = plane.radii
    keep = ellipse_value(plane.project(scan.points), ra, rb) <= 1.0
    if not keep.any():
        log.warning("crop removed every scan point")
    return replace(scan, points=scan.points[keep])


def prepare_scan(scan: Scan, enclose: bool = True) -> tuple[Scan, CropPlane]:
    """Fit the plane to ``scan.landmarks83``, size the ellipse and crop.

    ``enclose=False`` uses the raw per-axis extents as radii.
    """
    if scan.landmarks83 is None:
        raise ValueError("scan has no landmarks")
    plane = fit_pca_plane(scan.landmarks83)
    radii = enclosing_radii(plane, scan.landmarks83) if enclose else ellipse_radii(plane, scan.landmarks83)
    plane = replace(plane, radii=radii)
    return crop_scan(scan, plane), plane


def read_landmarks_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                rows.append([float(x) for x in row[:3]])
            except ValueError:
                if lineno == 1:  # header row
                    continue
                raise ValueError(f"{path}:{lineno}: expected x,y,z") from None
            if len(rows[-1]) != 3:
                raise ValueError(f"{path}:{lineno}: expected x,y,z")
    return np.array(rows, dtype=float).reshape(-1, 3)


def write_landmarks_csv(landmarks, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z"])
        for x, y, z in np.asarray(landmarks, dtype=float).tolist():
            w.writerow([repr(x), repr(y), repr(z)])


def synth_head_scan(asset, params, rng, n_face: int = 4000, n_hair: int = 3000,
                    hair_offset: float = 6.0):
    """Frontal capture of the posed model plus a hair shell over the crown.

    Surface samples facing away from the camera (+z) are dropped, as a frontal
    scanner would.  Returns a :class:`Scan` with the model's 83 landmarks attached.
    """
    from .mesh import Mesh
    from .model import embed_landmarks, forward

    verts = forward(asset, params)
    mesh = Mesh(verts, asset.faces)
    centre = verts.mean(axis=0)

    def frontal(n):
        pts, _, _ = mesh.sample_surface(4 * n, rng)
        radial = pts - centre
        radial /= np.linalg.norm(radial, axis=1, keepdims=True)
        keep = radial[:, 2] > -0.1
        return pts[keep], radial[keep]

    face_pts, _ = frontal(n_face)
    shell, radial = frontal(n_hair)
    hair = (shell + hair_offset * radial)[radial[:, 1] > 0.55][:n_hair]
    points = np.concatenate([face_pts[:n_face], hair])
    return Scan(points, embed_landmarks(asset, verts))
