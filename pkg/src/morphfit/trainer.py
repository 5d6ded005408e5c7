"""Small-network training on the gradient tape: the affect head and a toy expression encoder."""
from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from .grad import BN_EPS, BN_MOMENTUM, Tape, Var
from .losses import LossWeights, emo_loss_t, encoder_loss_t, lmk_loss_t, make_yaw_mask, pdl_loss_t, reg_loss_t
from .metrics import DegenerateInputError, ccc
from .model import ModelAsset, ParamVector, embedding_matrix, yaw_of

log = logging.getLogger(__name__)

HEAD_MAGIC = b"MFH1"


class TrainingConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-3
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: tuple = (256, 128, 64)
    val_fraction: float = 0.2
    class_weights: bool = False
    lambda_r: float = 1.0
    lambda_c: float = 1.0
    warmup_epochs: int = 6
    frac_3d_warmup: float = 0.3
    frac_3d: float = 0.1

    def __post_init__(self):
        if not self.lr >= 0:
            raise TrainingConfigError("lr must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise TrainingConfigError("batch_size must be >= 1 and epochs >= 0")
        self.hidden = tuple(int(h) for h in self.hidden)


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    def __init__(self, params: dict, lr=2e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# ---------------------------------------------------------------------------
# networks


class Mlp:
    """Stack of linear layers; hidden layers optionally batch-normalised, all leaky-ReLU."""

    def __init__(self, sizes, rng, batch_norm: bool):
        self.sizes = tuple(int(s) for s in sizes)
        self.batch_norm = batch_norm
        self.params: dict[str, np.ndarray] = {}
        self.stats: dict[str, np.ndarray] = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            self.params[f"l{i}.W"] = rng.uniform(-bound, bound, (fan_out, fan_in))
            self.params[f"l{i}.b"] = rng.uniform(-bound, bound, fan_out)
            if batch_norm and i < len(self.sizes) - 2:
                self.params[f"bn{i}.gamma"] = np.ones(fan_out)
                self.params[f"bn{i}.beta"] = np.zeros(fan_out)
                self.stats[f"bn{i}.mean"] = np.zeros(fan_out)
                self.stats[f"bn{i}.var"] = np.ones(fan_out)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def leaves(self, tape: Tape) -> dict[str, Var]:
        return {k: tape.leaf(v) for k, v in self.params.items()}

    def record(self, tape: Tape, x: Var, pv: dict, mode: str = "eval"):
        """Returns the output Var and the batch-norm nodes (for running-stat updates)."""
        if mode not in ("train", "eval"):
            raise TrainingConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        if self.batch_norm and mode == "train" and x.shape[0] < 2:
            raise TrainingConfigError("train mode needs a batch of at least 2")
        bn_nodes = {}
        h = x
        for i in range(self.n_layers):
            h = tape.record("linear", [h, pv[f"l{i}.W"], pv[f"l{i}.b"]])
            if i == self.n_layers - 1:
                break
            if f"bn{i}.gamma" in pv:
                attrs = {"mode": mode}
                if mode == "eval":
                    attrs.update(running_mean=self.stats[f"bn{i}.mean"], running_var=self.stats[f"bn{i}.var"])
                h = tape.record("batch_norm", [h, pv[f"bn{i}.gamma"], pv[f"bn{i}.beta"]], **attrs)
                bn_nodes[i] = h
            h = tape.record("leaky_relu", [h])
        return h, bn_nodes

    def update_stats(self, tape: Tape, bn_nodes: dict) -> None:
        for i, var in bn_nodes.items():
            cache = tape.nodes[var.id].cache
            n = var.shape[0]
            m = BN_MOMENTUM
            self.stats[f"bn{i}.mean"] = (1 - m) * self.stats[f"bn{i}.mean"] + m * cache["mean"]
            self.stats[f"bn{i}.var"] = (1 - m) * self.stats[f"bn{i}.var"] + m * cache["var"] * n / (n - 1)

    def predict(self, x) -> np.ndarray:
        tape = Tape()
        out, _ = self.record(tape, tape.const(x), {k: tape.const(v) for k, v in self.params.items()}, "eval")
        return out.value

    def arrays(self, prefix="") -> dict:
        d = {prefix + k: v for k, v in self.params.items()}
        d.update({prefix + k: v for k, v in self.stats.items()})
        return d

    def load_arrays(self, arrays: dict, prefix="") -> None:
        for store in (self.params, self.stats):
            for k in store:
                store[k] = np.array(arrays[prefix + k], dtype=float)


class EmotionHead(Mlp):
    """Maps (beta, psi_exp, psi_eye, theta_jaw) to tanh-squashed VA and class logits."""

    def __init__(self, in_dim: int, n_classes: int = 7, hidden=(256, 128, 64), seed: int = 0):
        if n_classes < 2:
            raise TrainingConfigError("need at least 2 classes")
        self.in_dim, self.n_classes, self.hidden = int(in_dim), int(n_classes), tuple(hidden)
        super().__init__((in_dim, *hidden, 2 + n_classes), np.random.default_rng(seed), batch_norm=True)

    def record_outputs(self, tape: Tape, x: Var, pv: dict, mode: str = "eval"):
        out, bn = self.record(tape, x, pv, mode)
        va = tape.record("tanh", [tape.record("slice", [out], index=(slice(None), slice(0, 2)))])
        logits = tape.record("slice", [out], index=(slice(None), slice(2, None)))
        return va, logits, bn

    def save(self, path) -> None:
        meta = {"kind": "emotion_head", "in_dim": self.in_dim, "n_classes": self.n_classes,
                "hidden": list(self.hidden)}
        container.write(path, HEAD_MAGIC, self.arrays(), meta)

    @classmethod
    def load(cls, path) -> "EmotionHead":
        arrays, meta = container.read(path, HEAD_MAGIC)
        if meta.get("kind") != "emotion_head":
            raise container.ContainerError(f"{path}: not an emotion head checkpoint")
        head = cls(meta["in_dim"], meta["n_classes"], tuple(meta["hidden"]))
        head.load_arrays(arrays)
        return head


def head_features(params: ParamVector) -> np.ndarray:
    return np.concatenate([params.beta, params.psi_exp, params.psi_eye, params.theta_jaw])


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def head_forward(head: EmotionHead, beta, psi, mode: str = "eval"):
    """Affect prediction from shape ``beta`` (B, D_b) and ``psi`` (B, D_psi + 5).

    ``psi`` concatenates psi_exp, psi_eye and theta_jaw.  Returns ``(v, a, p)``.
    """
    x = np.concatenate([np.atleast_2d(beta), np.atleast_2d(psi)], axis=1)
    if x.shape[1] != head.in_dim:
        raise TrainingConfigError(f"head expects {head.in_dim} inputs, got {x.shape[1]}")
    tape = Tape()
    pv = {k: tape.const(v) for k, v in head.params.items()}
    va, logits, _ = head.record_outputs(tape, tape.const(x), pv, mode)
    return va.value[:, 0], va.value[:, 1], _softmax(logits.value)


# ---------------------------------------------------------------------------
# emotion-head training


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        idx = order[s:s + batch_size]
        if len(idx) >= 2:  # batch statistics need two samples
            yield idx


def _class_weights(labels, n_classes):
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    w = np.where(counts > 0, counts.sum() / (n_classes * np.maximum(counts, 1)), 0.0)
    return w


def _emo_eval(head, x, va, labels, cfg, cw):
    tape = Tape()
    pv = {k: tape.const(v) for k, v in head.params.items()}
    va_hat, logits, _ = head.record_outputs(tape, tape.const(x), pv, "eval")
    loss = emo_loss_t(tape, va_hat, logits, va, labels, cfg.lambda_r, cfg.lambda_c, cw)
    pred = np.argmax(logits.value, axis=1)
    out = {"loss": float(loss.value), "accuracy": float(np.mean(pred == labels))}
    for j, axis in enumerate("va"):
        try:
            out[f"ccc_{axis}"] = ccc(va_hat.value[:, j], va[:, j])
        except DegenerateInputError:
            out[f"ccc_{axis}"] = float("nan")
    return out


def train_emotion_head(features, va, labels, config: TrainConfig = TrainConfig(), n_classes: int = 7,
                       val=None):
    """Fit an :class:`EmotionHead` on feature rows with VA targets and class labels.

    ``val`` is an optional ``(features, va, labels)`` triple; otherwise a seeded
    ``config.val_fraction`` of the data is held out.  The returned head holds the
    weights of the epoch with the lowest validation loss.
    """
    x = np.asarray(features, dtype=float)
    va = np.asarray(va, dtype=float).reshape(-1, 2)
    labels = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise TrainingConfigError("empty dataset")
    if not (len(x) == len(va) == len(labels)):
        raise TrainingConfigError("features, va and labels differ in length")
    if np.any(np.abs(va) > 1):
        raise TrainingConfigError("VA labels must lie in [-1, 1]")
    if len(np.unique(labels)) < 2:
        raise TrainingConfigError("need at least 2 classes present")
    rng = np.random.default_rng(config.seed)
    if val is None:
        perm = rng.permutation(len(x))
        n_val = max(1, int(round(config.val_fraction * len(x))))
        vi, ti = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        val = (x[vi], va[vi], labels[vi])
        x, va, labels = x[ti], va[ti], labels[ti]
    xv, vav, lv = (np.asarray(a) for a in val)
    lv = lv.astype(np.int64)

    head = EmotionHead(x.shape[1], n_classes, config.hidden, seed=config.seed)
    opt = Adam(head.params, config.lr, config.beta1, config.beta2, config.eps)
    cw = _class_weights(labels, n_classes) if config.class_weights else None
    history = []
    best = (math.inf, copy.deepcopy(head.params), copy.deepcopy(head.stats))
    for epoch in range(1, config.epochs + 1):
        losses = []
        for idx in _batches(len(x), config.batch_size, rng):
            tape = Tape()
            pv = head.leaves(tape)
            va_hat, logits, bn = head.record_outputs(tape, tape.const(x[idx]), pv, "train")
            loss = emo_loss_t(tape, va_hat, logits, va[idx], labels[idx], config.lambda_r, config.lambda_c, cw)
            if not math.isfinite(float(loss.value)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            grads = tape.backward(loss)
            opt.step({k: grads[v] for k, v in pv.items()})
            head.update_stats(tape, bn)
            losses.append(float(loss.value))
        ev = _emo_eval(head, xv, vav, lv, config, cw)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
                        "val_loss": ev["loss"], "val_accuracy": ev["accuracy"],
                        "val_ccc_v": ev["ccc_v"], "val_ccc_a": ev["ccc_a"]})
        if ev["loss"] < best[0]:
            best = (ev["loss"], copy.deepcopy(head.params), copy.deepcopy(head.stats))
    if history:
        head.params.update(best[1])
        head.stats.update(best[2])
    return head, history


def history_csv(history) -> str:
    if not history:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(history[0]), lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# landmark rig: forward + embed + project restricted to landmark vertices


class LandmarkRig:
    """Batched head model evaluated only on the vertices the landmarks touch."""

    def __init__(self, asset: ModelAsset):
        used = np.unique(asset.faces[asset.lmk_faces].ravel())
        self.asset = asset
        self.template = asset.template[used]
        self.shape_basis = asset.shape_basis[used]
        self.expr_basis = asset.expr_basis[used]
        self.eye_basis = asset.eye_basis[used]
        self.jaw_weights = asset.jaw_weights[used]
        self.pivot = asset.jaw_pivot
        self.matrix = embedding_matrix(asset, asset.lmk_faces, asset.lmk_bary)[:, used]
        self.mask_fn = make_yaw_mask(asset.lmk_side)

    def record(self, tape: Tape, beta: Var, psi_exp: Var, psi_eye: Var, theta_jaw: Var,
               theta_head: Var, cam: Var) -> Var:
        """Projected landmarks (B, 83, 2) for a batch of parameter rows."""
        shaped = tape.record("add", [tape.const(self.template), tape.record("blend", [beta], basis=self.shape_basis)])
        shaped = tape.record("add", [shaped, tape.record("blend", [psi_exp], basis=self.expr_basis)])
        shaped = tape.record("add", [shaped, tape.record("blend", [psi_eye], basis=self.eye_basis)])
        rot = tape.record("rodrigues_rotate", [theta_jaw, shaped], pivot=self.pivot)
        jawed = tape.record("lbs_blend", [rot, shaped], weights=self.jaw_weights)
        posed = tape.record("rodrigues_rotate", [theta_head, jawed])
        return tape.record("project", [tape.record("embed", [posed], matrix=self.matrix), cam])

    def visibility(self, theta_head) -> np.ndarray:
        return np.stack([self.mask_fn(yaw_of(t)) for t in np.atleast_2d(theta_head)])


# ---------------------------------------------------------------------------
# toy encoder


@dataclass
class EncoderSample:
    landmarks2d: np.ndarray
    base: ParamVector
    psi_gt: np.ndarray | None = None
    affect: tuple | None = None  # (valence, arousal, class)


def encoder_inputs(samples, asset: ModelAsset) -> np.ndarray:
    """Landmarks mapped back through each base camera, relative to the template, in cm."""
    from .model import embed_landmarks

    ref = embed_landmarks(asset, asset.template)[:, :2]
    rows = []
    for s in samples:
        s_, tx, ty = s.base.cam
        rows.append((((np.asarray(s.landmarks2d) - (tx, ty)) / s_ - ref) / 10.0).ravel())
    return np.array(rows)


class ToyEncoder(Mlp):
    """Landmark MLP predicting psi_exp, psi_eye and theta_jaw."""

    def __init__(self, n_landmarks: int, n_expr: int, hidden=(128, 64), seed: int = 0):
        self.n_landmarks, self.n_expr, self.hidden = int(n_landmarks), int(n_expr), tuple(hidden)
        super().__init__((2 * n_landmarks, *hidden, n_expr + 5), np.random.default_rng(seed), batch_norm=False)

    def record_outputs(self, tape: Tape, x: Var, pv: dict):
        out, _ = self.record(tape, x, pv)
        ne = self.n_expr
        psi_exp = tape.record("slice", [out], index=(slice(None), slice(0, ne)))
        psi_eye = tape.record("slice", [out], index=(slice(None), slice(ne, ne + 2)))
        theta_jaw = tape.record("slice", [out], index=(slice(None), slice(ne + 2, ne + 5)))
        return psi_exp, psi_eye, theta_jaw

    def encode(self, x) -> np.ndarray:
        """Encoder outputs (B, n_expr + 5) in eval mode."""
        return self.predict(np.atleast_2d(x))


@dataclass
class EncoderRun:
    encoder: ToyEncoder
    head: EmotionHead
    history: list = field(default_factory=list)


def _stack(samples, attr):
    return np.stack([getattr(s.base, attr) for s in samples])


def _encoder_batch_plan(has_gt, batch_size, frac, rng):
    """Batches mixing 3D-supervised rows at fraction ``frac`` with the remaining rows."""
    gt = rng.permutation(np.flatnonzero(has_gt))
    other = rng.permutation(np.flatnonzero(~has_gt))
    n_gt = int(round(frac * batch_size)) if len(gt) and len(other) else (batch_size if len(gt) else 0)
    n_other = batch_size - n_gt
    steps = max(1, math.ceil(len(has_gt) / batch_size))
    out = []
    for k in range(steps):
        parts = []
        if n_gt:
            parts.append(np.take(gt, np.arange(k * n_gt, (k + 1) * n_gt), mode="wrap"))
        if n_other:
            parts.append(np.take(other, np.arange(k * n_other, (k + 1) * n_other), mode="wrap"))
        idx = np.concatenate(parts)
        out.append(np.unique(idx) if len(idx) > len(has_gt) else idx)
    return out


def encoder_step_loss(tape: Tape, enc: ToyEncoder, head: EmotionHead, rig: LandmarkRig, batch,
                      x, weights: LossWeights, lambda_3d, enc_vars, head_vars, config: TrainConfig):
    """Record one Encoder-Pass objective on ``tape``.

    Returns ``(total, terms, base_leaves, bn_nodes)``.  Base predictions enter as
    leaves routed through stop-gradient so their zero gradient can be checked.
    """
    B = len(batch)
    base = {k: tape.leaf(_stack(batch, k)) for k in ("beta", "psi_exp", "theta_head", "cam")}
    frozen = {k: tape.record("stop_gradient", [v]) for k, v in base.items()}
    psi_exp, psi_eye, theta_jaw = enc.record_outputs(tape, tape.const(x), enc_vars)
    terms = {}
    use_2d = weights.lambda_2d > 0 and (weights.w_2d[2] > 0 or weights.w_2d[3] > 0)
    if use_2d:
        proj = rig.record(tape, frozen["beta"], psi_exp, psi_eye, theta_jaw, frozen["theta_head"], frozen["cam"])
        det = tape.const(np.stack([s.landmarks2d for s in batch]))
        terms["lmk"] = tape.record("scale", [lmk_loss_t(tape, proj, det)], c=1.0 / B)
        mask = rig.visibility(_stack(batch, "theta_head"))
        terms["pdl"] = tape.record("scale", [pdl_loss_t(tape, proj, det, mask)], c=1.0 / B)
    rows3 = [i for i, s in enumerate(batch) if s.psi_gt is not None]
    if lambda_3d > 0 and rows3:
        sel = tape.record("slice", [psi_exp], index=(np.array(rows3),))
        gt = tape.const(np.stack([batch[i].psi_gt for i in rows3]))
        terms["l3d"] = tape.record("scale", [tape.record("sqdist", [sel, gt])], c=1.0 / len(rows3))
    bn_nodes = {}
    rows_e = [i for i, s in enumerate(batch) if s.affect is not None]
    if weights.lambda_emo > 0 and rows_e and B >= 2:
        feats = tape.record("concat", [frozen["beta"], psi_exp, psi_eye, theta_jaw], axis=-1)
        va_hat, logits, bn_nodes = head.record_outputs(tape, feats, head_vars, "train")
        ri = (np.array(rows_e),)
        va_gt = np.array([batch[i].affect[:2] for i in rows_e], dtype=float)
        lab = np.array([batch[i].affect[2] for i in rows_e], dtype=np.int64)
        terms["emo"] = emo_loss_t(tape, tape.record("slice", [va_hat], index=ri),
                                  tape.record("slice", [logits], index=ri), va_gt, lab,
                                  weights.lambda_r, weights.lambda_c)
    if weights.lambda_shape_reg > 0 or weights.lambda_expr_reg > 0:
        reg = reg_loss_t(tape, frozen["beta"], psi_exp, base["beta"], base["psi_exp"],
                         weights.lambda_shape_reg, weights.lambda_expr_reg)
        terms["reg"] = tape.record("scale", [reg], c=1.0 / B)
    total = encoder_loss_t(tape, terms, weights, lambda_3d=lambda_3d)
    return total, terms, base, bn_nodes


def train_toy_encoder(asset: ModelAsset, samples, weights: LossWeights = LossWeights(),
                      config: TrainConfig = TrainConfig(), n_classes: int = 7, encoder_hidden=(128, 64),
                      val_samples=None) -> EncoderRun:
    """Encoder-Pass training of a :class:`ToyEncoder` (and a jointly trained head).

    Only the encoder and head are updated.  During the first
    ``config.warmup_epochs`` epochs the 3D term uses ``weights.lambda_3d_warmup``
    and ``config.frac_3d_warmup`` of each batch comes from 3D-supervised samples.
    With ``val_samples`` the returned networks are those of the epoch with the
    lowest validation psi MSE.
    """
    samples = list(samples)
    if not samples:
        raise TrainingConfigError("no samples")
    _, nb, ne = asset.dims
    for s in samples:
        if s.base.dims != (nb, ne):
            raise TrainingConfigError(f"base params dims {s.base.dims} do not match asset {(nb, ne)}")
        if np.shape(s.landmarks2d) != (len(asset.lmk_faces), 2):
            raise TrainingConfigError("every sample needs a full set of 2D landmarks")
    rng = np.random.default_rng(config.seed)
    rig = LandmarkRig(asset)
    x_all = encoder_inputs(samples, asset)
    enc = ToyEncoder(len(asset.lmk_faces), ne, encoder_hidden, seed=config.seed)
    head = EmotionHead(nb + ne + 5, n_classes, config.hidden, seed=config.seed + 1)
    enc_opt = Adam(enc.params, config.lr, config.beta1, config.beta2, config.eps)
    head_opt = Adam(head.params, config.lr, config.beta1, config.beta2, config.eps)
    has_gt = np.array([s.psi_gt is not None for s in samples])
    history = []
    best = (math.inf, None)
    for epoch in range(1, config.epochs + 1):
        warm = epoch <= config.warmup_epochs
        lam3 = weights.lambda_3d_warmup if warm else weights.lambda_3d
        frac = config.frac_3d_warmup if warm else config.frac_3d
        sums: dict[str, float] = {}
        steps = 0
        for idx in _encoder_batch_plan(has_gt, config.batch_size, frac, rng):
            batch = [samples[i] for i in idx]
            tape = Tape()
            ev = enc.leaves(tape)
            hv = head.leaves(tape)
            total, terms, base, bn = encoder_step_loss(tape, enc, head, rig, batch, x_all[idx], weights, lam3,
                                                       ev, hv, config)
            if not math.isfinite(float(total.value)):
                raise TrainingDiverged(f"non-finite encoder loss at epoch {epoch}")
            grads = tape.backward(total)
            for k, v in base.items():
                if np.any(grads[v] != 0):
                    raise AssertionError(f"frozen base {k} received a gradient")
            enc_opt.step({k: grads[v] for k, v in ev.items()})
            head_opt.step({k: grads[v] for k, v in hv.items()})
            head.update_stats(tape, bn)
            steps += 1
            sums["total"] = sums.get("total", 0.0) + float(total.value)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v.value)
        row = {"epoch": epoch, "lambda_3d": lam3}
        row.update({f"train_{k}": sums.get(k, 0.0) / steps for k in ("total", "lmk", "pdl", "l3d", "emo", "reg")})
        if val_samples:
            row["val_psi_mse"] = psi_mse(enc, asset, val_samples)
            if row["val_psi_mse"] < best[0]:
                best = (row["val_psi_mse"], copy.deepcopy((enc.params, head.params, head.stats)))
        history.append(row)
    if best[1] is not None:
        for live, kept in zip((enc.params, head.params, head.stats), best[1]):
            live.update(kept)
    return EncoderRun(enc, head, history)


def encode_samples(enc: ToyEncoder, asset: ModelAsset, samples) -> list[ParamVector]:
    """Full parameter vectors: encoder expression outputs on top of each base."""
    out = enc.encode(encoder_inputs(samples, asset))
    ne = enc.n_expr
    res = []
    for s, row in zip(samples, out):
        p = s.base.copy()
        p.psi_exp, p.psi_eye, p.theta_jaw = row[:ne].copy(), row[ne:ne + 2].copy(), row[ne + 2:ne + 5].copy()
        res.append(p)
    return res


def psi_mse(enc: ToyEncoder, asset: ModelAsset, samples) -> float:
    """Per-dimension MSE of predicted psi_exp against ``psi_gt`` over samples that have it."""
    samples = [s for s in samples if s.psi_gt is not None]
    if not samples:
        return float("nan")
    pred = encode_samples(enc, asset, samples)
    return float(np.mean([np.mean((p.psi_exp - s.psi_gt) ** 2) for p, s in zip(pred, samples)]))
