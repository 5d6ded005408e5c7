"""Supervision losses for the encoder: parameter, affect, landmark, image and prior terms.

Each loss exists twice: a plain numpy function returning a float, and a ``*_t``
variant that records the same arithmetic on a :class:`~morphfit.grad.Tape`.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .grad import Tape, Var

TERMS_2D = ("photo", "perc", "lmk", "pdl", "region")
YAW_THRESHOLD = math.pi / 9
SIMPLEX_TOL = 1e-6


def _pair(a, b, what):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


@dataclass
class LossWeights:
    lambda_2d: float = 1.0
    w_2d: tuple = (10.0, 10.0, 10.0, 100.0, 500.0)
    lambda_3d: float = 1.0
    lambda_3d_warmup: float = 5.0
    lambda_emo: float = 5.0
    lambda_r: float = 1.0
    lambda_c: float = 1.0
    lambda_shape_reg: float = 100.0
    lambda_expr_reg: float = 1e-2
    lambda_lmk_pre: float = 100.0
    lambda_mica_pre: float = 10.0

    def __post_init__(self):
        self.w_2d = tuple(float(w) for w in self.w_2d)
        if len(self.w_2d) != len(TERMS_2D):
            raise ValueError(f"w_2d needs {len(TERMS_2D)} entries, got {len(self.w_2d)}")
        for f in fields(self):
            v = getattr(self, f.name)
            vals = v if isinstance(v, tuple) else (v,)
            if any(not math.isfinite(x) or x < 0 for x in vals):
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown loss weight(s): {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "LossWeights":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["w_2d"] = list(self.w_2d)
        return d


@dataclass
class TermBundle:
    """Named scalar terms; ``None`` marks an absent term."""

    terms: dict = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for k, v in self.terms.items():
            if v is not None:
                v = float(v)
                if not math.isfinite(v) or v < 0:
                    raise ValueError(f"term {k!r} must be finite and >= 0, got {v}")
            clean[k] = v
        self.terms = clean

    def present(self, name) -> bool:
        return self.terms.get(name) is not None

    def value(self, name) -> float:
        v = self.terms.get(name)
        return 0.0 if v is None else v

    def absent(self, names) -> list[str]:
        return [n for n in names if not self.present(n)]


# ---------------------------------------------------------------------------
# numpy losses


def l3d_gt(psi_hat, psi_gt) -> float:
    """Sum of squared expression-coefficient residuals."""
    a, b = _pair(psi_hat, psi_gt, "l3d_gt")
    return float(np.sum((a - b) ** 2))


def emo_loss(pred, gt, lambda_r=1.0, lambda_c=1.0) -> float:
    """Affect loss for one sample.

    ``pred = (v_hat, a_hat, p_hat)`` with ``p_hat`` a probability vector and
    ``gt = (v, a, k)`` with integer class ``k``.
    """
    v_hat, a_hat, p_hat = pred
    v, a, k = gt
    p_hat = np.asarray(p_hat, dtype=float)
    if p_hat.ndim != 1 or np.any(p_hat <= 0) or abs(p_hat.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError("class probabilities must be positive and sum to 1")
    if not 0 <= int(k) < len(p_hat):
        raise ValueError(f"class index {k} outside [0, {len(p_hat)})")
    if not (-1 <= v <= 1 and -1 <= a <= 1):
        raise ValueError("valence/arousal labels must lie in [-1, 1]")
    return float(lambda_r * (v - v_hat) ** 2 + lambda_r * (a - a_hat) ** 2
                 - lambda_c * math.log(p_hat[int(k)]))


def lmk_loss(k_detected, k_projected) -> float:
    """Sum over landmarks of squared 2D distance."""
    a, b = _pair(k_detected, k_projected, "lmk_loss")
    return float(np.sum((a - b) ** 2))


def make_yaw_mask(sides, threshold=YAW_THRESHOLD):
    """Visibility rule from per-landmark side labels (-1, 0, +1).

    Beyond ``threshold`` of yaw, the half-face turned away from the camera is
    hidden: positive yaw hides side +1, negative yaw hides side -1.
    """
    sides = np.asarray(sides)

    def mask_fn(yaw):
        m = np.ones(len(sides))
        if yaw > threshold:
            m[sides > 0] = 0.0
        elif yaw < -threshold:
            m[sides < 0] = 0.0
        return m

    return mask_fn


def pdl_loss(L, L_v, theta_y, mask_fn) -> float:
    """Squared norm of the visibility-masked landmark difference."""
    a, b = _pair(L, L_v, "pdl_loss")
    m = np.asarray(mask_fn(theta_y), dtype=float)
    if m.shape != (a.shape[0],):
        raise ValueError(f"mask has shape {m.shape}, expected ({a.shape[0]},)")
    return float(np.sum((m[:, None] * a - m[:, None] * b) ** 2))


def photo_loss(img, img_hat) -> float:
    a, b = _pair(img, img_hat, "photo_loss")
    return float(np.mean(np.abs(a - b)))


def region_loss(img, img_hat, mask) -> float:
    """Masked squared difference normalised by the number of mask pixels."""
    a, b = _pair(img, img_hat, "region_loss")
    mask = np.asarray(mask, dtype=float)
    if mask.shape != a.shape[:2]:
        raise ValueError(f"region_loss: mask {mask.shape} vs image {a.shape}")
    n = mask.sum()
    if n == 0:
        return 0.0
    m = mask.reshape(mask.shape + (1,) * (a.ndim - 2))
    return float(np.sum((m * a - m * b) ** 2) / n)


def combine_2d(bundle: TermBundle, w_2d=LossWeights.w_2d) -> float:
    w = np.asarray(w_2d, dtype=float)
    if w.shape != (len(TERMS_2D),):
        raise ValueError(f"w_2d needs {len(TERMS_2D)} entries")
    return float(sum(wi * bundle.value(n) for wi, n in zip(w, TERMS_2D)))


def reg_loss(params, base, lambda_shape_reg, lambda_expr_reg) -> float:
    b, bb = _pair(params.beta, base.beta, "reg_loss beta")
    e, eb = _pair(params.psi_exp, base.psi_exp, "reg_loss psi_exp")
    return float(lambda_shape_reg * np.sum((b - bb) ** 2) + lambda_expr_reg * np.sum((e - eb) ** 2))


def pretrain_loss(k_hat, k_mp, k_fan, beta_hat, beta_ref, lambda_lmk_pre=100.0,
                  lambda_mica_pre=10.0) -> float:
    a, b = _pair(k_hat, k_mp, "pretrain_loss mediapipe")
    _, c = _pair(k_hat, k_fan, "pretrain_loss fan")
    s, r = _pair(beta_hat, beta_ref, "pretrain_loss beta")
    return float(lambda_lmk_pre * (np.sum((a - b) ** 2) + np.sum((a - c) ** 2))
                 + lambda_mica_pre * np.sum((s - r) ** 2))


def encoder_loss(bundle: TermBundle, weights: LossWeights, lambda_3d=None):
    """Total objective and its weighted breakdown.

    ``bundle`` holds the five 2D terms plus ``l3d``, ``emo`` and ``reg`` (the last
    already weighted).  ``lambda_3d`` overrides ``weights.lambda_3d`` (warmup).
    """
    l3 = weights.lambda_3d if lambda_3d is None else lambda_3d
    breakdown = {
        "2d": weights.lambda_2d * combine_2d(bundle, weights.w_2d),
        "3d": l3 * bundle.value("l3d"),
        "emo": weights.lambda_emo * bundle.value("emo"),
        "reg": bundle.value("reg"),
    }
    return float(sum(breakdown.values())), breakdown


# ---------------------------------------------------------------------------
# tape variants


def l3d_gt_t(tape: Tape, psi_hat: Var, psi_gt: Var) -> Var:
    return tape.record("sqdist", [psi_hat, psi_gt])


def lmk_loss_t(tape: Tape, k_detected: Var, k_projected: Var) -> Var:
    return tape.record("sqdist", [k_detected, k_projected])


def pdl_loss_t(tape: Tape, L: Var, L_v: Var, mask) -> Var:
    m = tape.const(np.asarray(mask, dtype=float)[..., None])
    return tape.record("sqdist", [tape.record("mul", [m, L]), tape.record("mul", [m, L_v])])


def emo_loss_t(tape: Tape, va_hat: Var, logits: Var, va_gt, labels, lambda_r=1.0,
               lambda_c=1.0, class_weights=None) -> Var:
    """Batch mean of the affect loss; ``va_hat`` (B, 2) and ``logits`` (B, C)."""
    va_gt = np.asarray(va_gt, dtype=float)
    n = va_gt.shape[0]
    reg = tape.record("sqdist", [va_hat, tape.const(va_gt)])
    ce = tape.record("sum", [tape.record("softmax_ce", [logits], labels=np.asarray(labels),
                                         class_weights=class_weights)])
    return tape.record("weighted_sum", [reg, ce], weights=(lambda_r / n, lambda_c / n))


def reg_loss_t(tape: Tape, beta: Var, psi_exp: Var, beta_base: Var, psi_base: Var,
               lambda_shape_reg, lambda_expr_reg) -> Var:
    """Prior towards the base prediction; no gradient reaches the base."""
    sb = tape.record("stop_gradient", [beta_base])
    sp = tape.record("stop_gradient", [psi_base])
    return tape.record("weighted_sum", [tape.record("sqdist", [beta, sb]), tape.record("sqdist", [psi_exp, sp])],
                       weights=(lambda_shape_reg, lambda_expr_reg))


def pretrain_loss_t(tape: Tape, k_hat: Var, k_mp: Var, k_fan: Var, beta_hat: Var, beta_ref: Var,
                    lambda_lmk_pre=100.0, lambda_mica_pre=10.0) -> Var:
    parts = [tape.record("sqdist", [k_hat, k_mp]), tape.record("sqdist", [k_hat, k_fan]),
             tape.record("sqdist", [beta_hat, beta_ref])]
    return tape.record("weighted_sum", parts, weights=(lambda_lmk_pre, lambda_lmk_pre, lambda_mica_pre))


def combine_2d_t(tape: Tape, terms: dict, w_2d) -> Var | None:
    present = [(w, terms[n]) for w, n in zip(w_2d, TERMS_2D) if terms.get(n) is not None]
    if not present:
        return None
    return tape.record("weighted_sum", [v for _, v in present], weights=tuple(w for w, _ in present))


def encoder_loss_t(tape: Tape, terms: dict, weights: LossWeights, lambda_3d=None) -> Var:
    """Tape version of :func:`encoder_loss`; ``terms`` maps names to scalar Vars or None."""
    l3 = weights.lambda_3d if lambda_3d is None else lambda_3d
    parts, ws = [], []
    two_d = combine_2d_t(tape, terms, weights.w_2d)
    for w, v in ((weights.lambda_2d, two_d), (l3, terms.get("l3d")),
                 (weights.lambda_emo, terms.get("emo")), (1.0, terms.get("reg"))):
        if v is not None:
            parts.append(v)
            ws.append(w)
    if not parts:
        return tape.const(0.0)
    return tape.record("weighted_sum", parts, weights=tuple(ws))
