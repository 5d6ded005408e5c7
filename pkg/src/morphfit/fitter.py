"""Fit model parameters to a (cropped) scan.

Energy::

    E = w_scan * mean_i d(scan_i, mesh)^2 + w_lmk * mean_j |L_j - L^_j|^2
        + w_shape |beta|^2 + w_pose |(theta_jaw, theta_head)|^2 + w_expr |(psi_exp, psi_eye)|^2

Each outer iteration freezes scan correspondences (face + barycentric weights of
the closest surface point), turning the energy into a smooth least-squares
problem solved with Levenberg-Marquardt.  The frozen scan residual is first
taken point-to-plane (normal of the corresponding face); if that step fails to
lower the true energy, the point-to-point residual, which bounds the true
energy from above, is solved instead.  The outer correspondence loop is a
fixed-point iteration; it is sped up with safeguarded Anderson acceleration (an
extrapolated iterate is only taken if it lowers the true energy further than
the plain iterate).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .mesh import Bvh, Mesh
from .model import MESH_BLOCKS, ModelAsset, ParamVector, embed_landmarks, forward, forward_jacobian
from .scanprep import Scan

log = logging.getLogger(__name__)

POSE_BLOCKS = ("theta_jaw", "theta_head")
TERMS = ("scan", "lmk", "shape", "pose", "expr")


class FitConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class FitWeights:
    w_scan: float = 2.0
    w_lmk: float = 0.1
    w_shape: float = 1e-4
    w_pose: float = 1e-3
    w_expr: float = 1e-4

    def __post_init__(self):
        for name in ("w_scan", "w_lmk", "w_shape", "w_pose", "w_expr"):
            if not getattr(self, name) >= 0:
                raise FitConfigurationError(f"{name} must be non-negative")

    @classmethod
    def parse(cls, text: str) -> "FitWeights":
        vals = [float(x) for x in text.split(",")]
        if len(vals) != 5:
            raise FitConfigurationError("expected 5 comma-separated weights (scan, lmk, shape, pose, expr)")
        return cls(*vals)

    def as_dict(self) -> dict:
        return dict(zip(TERMS, (self.w_scan, self.w_lmk, self.w_shape, self.w_pose, self.w_expr)))


@dataclass(frozen=True)
class FitConfig:
    max_outer_iters: int = 30
    rigid_outer_iters: int = 5
    max_inner_iters: int = 10
    lm_lambda0: float = 1e-3
    lm_up: float = 10.0
    lm_down: float = 10.0
    lm_lambda_max: float = 1e12
    rel_tol: float = 1e-6
    step_tol: float = 1e-8
    anderson_depth: int = 5

    def __post_init__(self):
        if self.max_outer_iters < 0 or self.rigid_outer_iters < 0 or self.max_inner_iters < 1:
            raise FitConfigurationError("iteration counts must be non-negative (inner >= 1)")
        if not (self.rel_tol > 0 and self.step_tol > 0 and self.lm_lambda0 > 0):
            raise FitConfigurationError("tolerances and initial damping must be positive")


@dataclass
class TraceEntry:
    iteration: int
    stage: str
    energy: float
    terms: dict
    step_norm: float
    damping: float
    inner_accepted: int


@dataclass
class FitTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    status: str = "running"

    def energies(self) -> list[float]:
        return [e.energy for e in self.entries]

    def is_monotone(self) -> bool:
        en = self.energies()
        return all(b <= a for a, b in zip(en, en[1:]))

    def to_csv(self) -> str:
        head = ["iteration", "stage", "energy", *(f"term_{t}" for t in TERMS), "step_norm", "damping", "inner_accepted"]
        rows = [",".join(head)]
        for e in self.entries:
            vals = [str(e.iteration), e.stage, repr(e.energy), *(repr(e.terms[t]) for t in TERMS),
                    repr(e.step_norm), repr(e.damping), str(e.inner_accepted)]
            rows.append(",".join(vals))
        return "\n".join(rows) + "\n"


def _check_landmarks(scan: Scan, weights: FitWeights):
    if weights.w_lmk > 0 and scan.landmarks83 is None:
        raise FitConfigurationError("landmark weight > 0 but the scan carries no landmarks")
    if scan.landmarks83 is not None and scan.landmarks83.shape != (83, 3):
        raise FitConfigurationError(f"expected 83 x 3 landmarks, got {scan.landmarks83.shape}")


def _reg_terms(params: ParamVector) -> dict:
    return {
        "shape": float(params.beta @ params.beta),
        "pose": float(params.theta_jaw @ params.theta_jaw + params.theta_head @ params.theta_head),
        "expr": float(params.psi_exp @ params.psi_exp + params.psi_eye @ params.psi_eye),
    }


def fit_objective(asset: ModelAsset, params: ParamVector, scan: Scan, weights: FitWeights,
                  bvh: Bvh | None = None) -> tuple[float, dict]:
    """Energy and the unweighted per-term breakdown."""
    if len(scan.points) == 0:
        raise ValueError("empty scan")
    _check_landmarks(scan, weights)
    verts = forward(asset, params)
    if bvh is None:
        bvh = Bvh(Mesh(verts, asset.faces))
    _, dist, _ = bvh.query(scan.points)
    terms = {"scan": float(np.mean(dist ** 2)), "lmk": 0.0}
    if scan.landmarks83 is not None:
        diff = scan.landmarks83 - embed_landmarks(asset, verts)
        terms["lmk"] = float(np.mean((diff ** 2).sum(axis=1)))
    terms.update(_reg_terms(params))
    w = weights.as_dict()
    return float(sum(w[t] * terms[t] for t in TERMS)), terms


class _FrozenProblem:
    """Least-squares residuals with scan correspondences held fixed."""

    def __init__(self, asset, scan, weights, blocks, corr_faces, corr_bary, normals=None):
        self.asset = asset
        self.normals = normals  # point-to-plane scan residuals when given
        self.scan = scan
        self.weights = weights
        self.blocks = blocks
        self.corr_vid = asset.faces[corr_faces]  # (M, 3)
        self.corr_bary = corr_bary
        self.lmk_vid = asset.faces[asset.lmk_faces]
        m = len(scan.points)
        self.s_scan = np.sqrt(weights.w_scan / m)
        self.s_lmk = np.sqrt(weights.w_lmk / 83.0)

    def _reg(self, p: ParamVector):
        w = self.weights
        return [np.sqrt(w.w_shape) * p.beta, np.sqrt(w.w_expr) * p.psi_exp, np.sqrt(w.w_expr) * p.psi_eye,
                np.sqrt(w.w_pose) * p.theta_jaw, np.sqrt(w.w_pose) * p.theta_head]

    def residual(self, p: ParamVector) -> np.ndarray:
        verts = forward(self.asset, p)
        model_pts = np.einsum("mk,mkd->md", self.corr_bary, verts[self.corr_vid])
        diff = model_pts - self.scan.points
        if self.normals is not None:
            diff = np.einsum("md,md->m", self.normals, diff)
        parts = [self.s_scan * diff.ravel()]
        if self.scan.landmarks83 is not None and self.weights.w_lmk > 0:
            lmk = np.einsum("mk,mkd->md", self.asset.lmk_bary, verts[self.lmk_vid])
            parts.append(self.s_lmk * (lmk - self.scan.landmarks83).ravel())
        parts.extend(self._reg(p))
        return np.concatenate(parts)

    def jacobian(self, p: ParamVector) -> np.ndarray:
        jac = forward_jacobian(self.asset, p)
        full = np.concatenate([jac[b] for b in MESH_BLOCKS], axis=2)  # (V, 3, n_all)
        scan_j = np.einsum("mk,mkdn->mdn", self.corr_bary, full[self.corr_vid])
        if self.normals is not None:
            scan_j = np.einsum("md,mdn->mn", self.normals, scan_j)
        rows = [self.s_scan * scan_j.reshape(-1, full.shape[2])]
        if self.scan.landmarks83 is not None and self.weights.w_lmk > 0:
            rows.append(self.s_lmk * np.einsum("mk,mkdn->mdn", self.asset.lmk_bary,
                                               full[self.lmk_vid]).reshape(-1, full.shape[2]))
        w = self.weights
        scales = np.concatenate([np.full(len(getattr(p, b)), s) for b, s in zip(
            MESH_BLOCKS, (w.w_shape, w.w_expr, w.w_expr, w.w_pose, w.w_pose))])
        rows.append(np.diag(np.sqrt(scales)))
        j = np.concatenate(rows, axis=0)
        cols = np.concatenate([np.full(len(getattr(p, b)), b in self.blocks) for b in MESH_BLOCKS])
        return j[:, cols]


def _correspondences(asset, verts, points):
    bvh = Bvh(Mesh(verts, asset.faces))
    closest, _, faces = bvh.query(points)
    tri = verts[asset.faces[faces]]
    return faces, _barycentric(closest, tri), bvh


def _face_normals(verts, faces):
    tri = verts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)


def _barycentric(p, tri):
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    v0, v1, v2 = b - a, c - a, p - a
    d00 = (v0 * v0).sum(1)
    d01 = (v0 * v1).sum(1)
    d11 = (v1 * v1).sum(1)
    d20 = (v2 * v0).sum(1)
    d21 = (v2 * v1).sum(1)
    den = d00 * d11 - d01 * d01
    safe = np.where(np.abs(den) > 0, den, 1.0)
    v = np.where(np.abs(den) > 0, (d11 * d20 - d01 * d21) / safe, 0.0)
    w = np.where(np.abs(den) > 0, (d00 * d21 - d01 * d20) / safe, 0.0)
    return np.stack([1.0 - v - w, v, w], axis=1)


def _lm_stage(problem, params, config, damping):
    """Run LM on the frozen problem; returns (params, frozen energy, step norm, damping, accepted)."""
    blocks = problem.blocks
    x = params.mesh_vector(blocks)
    r = problem.residual(params)
    energy = float(r @ r)
    accepted = 0
    last_step = 0.0
    for _ in range(config.max_inner_iters):
        jac = problem.jacobian(params)
        jtj = jac.T @ jac
        grad = jac.T @ r
        improved = False
        while damping <= config.lm_lambda_max:
            lhs = jtj + damping * np.diag(np.maximum(np.diag(jtj), 1e-12))
            try:
                step = -np.linalg.solve(lhs, grad)
            except np.linalg.LinAlgError:
                damping *= config.lm_up
                continue
            cand = params.with_mesh_vector(x + step, blocks)
            r_new = problem.residual(cand)
            e_new = float(r_new @ r_new)
            if np.isfinite(e_new) and e_new <= energy:
                rel = (energy - e_new) / max(energy, np.finfo(float).tiny)
                params, x, r, energy = cand, x + step, r_new, e_new
                damping = max(damping / config.lm_down, 1e-15)
                accepted += 1
                last_step = float(np.linalg.norm(step))
                improved = True
                break
            damping *= config.lm_up
        if not improved or rel < config.rel_tol or last_step < config.step_tol:
            break
    return params, energy, last_step, damping, accepted


class _Anderson:
    """Type-II Anderson mixing over the last ``depth`` fixed-point iterates."""

    def __init__(self, depth: int):
        self.depth = depth
        self.xs: list[np.ndarray] = []
        self.gs: list[np.ndarray] = []

    def reset(self):
        self.xs.clear()
        self.gs.clear()

    def push(self, x, g) -> np.ndarray | None:
        self.xs.append(x)
        self.gs.append(g)
        if len(self.xs) > self.depth + 1:
            self.xs.pop(0)
            self.gs.pop(0)
        if self.depth == 0 or len(self.xs) < 2:
            return None
        f = np.array([g_ - x_ for x_, g_ in zip(self.xs, self.gs)])
        g_arr = np.array(self.gs)
        d_f = np.diff(f, axis=0).T
        d_g = np.diff(g_arr, axis=0).T
        gamma, *_ = np.linalg.lstsq(d_f, f[-1], rcond=None)
        out = g_arr[-1] - d_g @ gamma
        return out if np.all(np.isfinite(out)) else None


def fit(asset: ModelAsset, scan: Scan, weights: FitWeights = FitWeights(), config: FitConfig = FitConfig(),
        init: ParamVector | None = None) -> tuple[ParamVector, FitTrace]:
    """Two-stage fit: pose only, then all mesh parameters.

    The trace holds one entry for the initial state plus one per outer
    iteration; each energy is the true (re-correspondenced) objective, so the
    sequence is non-increasing.
    """
    params = (init or ParamVector.for_asset(asset)).copy()
    if not params.is_finite():
        raise ValueError("initial parameters are not finite")
    _check_landmarks(scan, weights)
    if len(scan.points) == 0:
        raise ValueError("empty scan")

    def evaluate(p):
        verts = forward(asset, p)
        faces_, bary_, bvh_ = _correspondences(asset, verts, scan.points)
        e, t = fit_objective(asset, p, scan, weights, bvh_)
        return e, t, faces_, bary_

    energy, terms, faces, bary = evaluate(params)
    if not np.isfinite(energy):
        raise ValueError("objective is not finite at the initial parameters")
    trace = FitTrace([TraceEntry(0, "init", energy, terms, 0.0, config.lm_lambda0, 0)])

    n_rigid = min(config.rigid_outer_iters, config.max_outer_iters)
    damping = config.lm_lambda0
    converged = False
    stage, blocks, stage_iters = ("rigid", POSE_BLOCKS, 0) if n_rigid else ("full", MESH_BLOCKS, 0)
    accel = _Anderson(config.anderson_depth)
    for it in range(1, config.max_outer_iters + 1):
        if stage == "rigid" and (converged or stage_iters >= n_rigid):
            # an early-converged rigid stage hands its remaining budget to the full stage
            stage, blocks, stage_iters = "full", MESH_BLOCKS, 0
            accel.reset()
            converged = False
        if converged:
            break
        stage_iters += 1
        # point-to-plane first: it lets the surface slide along the scan and
        # converges much faster; the point-to-point surrogate bounds the true
        # energy from above, so it is the fallback that keeps the trace monotone
        normals = _face_normals(forward(asset, params), asset.faces[faces])
        problem = _FrozenProblem(asset, scan, weights, blocks, faces, bary, normals)
        new_params, _, step, damp_n, accepted = _lm_stage(problem, params, config, damping)
        e_new, terms_n, faces_n, bary_n = evaluate(new_params)
        if e_new > energy:
            problem = _FrozenProblem(asset, scan, weights, blocks, faces, bary)
            new_params, _, step, damp_n, accepted = _lm_stage(problem, params, config, damping)
            e_new, terms_n, faces_n, bary_n = evaluate(new_params)
        damping = damp_n
        if e_new > energy:  # cannot happen in exact arithmetic; guard against rounding
            log.debug("outer iteration %d rejected (%.3e > %.3e)", it, e_new, energy)
            converged = True
            continue
        x_aa = accel.push(params.mesh_vector(blocks), new_params.mesh_vector(blocks))
        if x_aa is not None:
            cand = new_params.with_mesh_vector(x_aa, blocks)
            e_aa, terms_aa, faces_aa, bary_aa = evaluate(cand)
            if e_aa < e_new:
                step = float(np.linalg.norm(x_aa - params.mesh_vector(blocks)))
                new_params, e_new, terms_n, faces_n, bary_n = cand, e_aa, terms_aa, faces_aa, bary_aa
        rel = (energy - e_new) / max(energy, np.finfo(float).tiny)
        params, energy, terms, faces, bary = new_params, e_new, terms_n, faces_n, bary_n
        trace.entries.append(TraceEntry(it, stage, energy, terms, step, damping, accepted))
        if rel < config.rel_tol or step < config.step_tol:
            converged = True
    trace.status = "converged" if converged or config.max_outer_iters == 0 else "max_iters"
    return params, trace
