"""Reverse-mode gradient tape over a fixed set of array operators.

Every operator registers a forward rule and a vector-Jacobian product; nothing
outside the registry can be recorded.  Values are float64 numpy arrays.

>>> tape = Tape()
>>> x = tape.leaf(np.array([1.0, 2.0]))
>>> y = tape.record("sum", [tape.record("mul", [x, x])])
>>> tape.backward(y)[x]
array([2., 4.])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import rodrigues_delta, rodrigues_grad

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class UnknownOpError(KeyError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass
class Var:
    tape: "Tape"
    id: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    def __hash__(self):
        return hash((id(self.tape), self.id))

    def __eq__(self, other):
        return isinstance(other, Var) and other.tape is self.tape and other.id == self.id


@dataclass
class _Node:
    op: str | None
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    cache: object = None
    requires_grad: bool = False


@dataclass(frozen=True)
class Op:
    forward: Callable
    backward: Callable


OPS: dict[str, Op] = {}


def register(name):
    def deco(cls):
        OPS[name] = Op(cls.forward, cls.backward)
        return cls
    return deco


class Tape:
    def __init__(self):
        self.nodes: list[_Node] = []

    def _push(self, node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value) -> Var:
        """Differentiable input."""
        return self._push(_Node(None, (), np.array(value, dtype=float), requires_grad=True))

    def const(self, value) -> Var:
        return self._push(_Node(None, (), np.array(value, dtype=float), requires_grad=False))

    def record(self, op: str, inputs, **attrs) -> Var:
        if op not in OPS:
            raise UnknownOpError(op)
        inputs = tuple(inputs)
        for v in inputs:
            if not isinstance(v, Var) or v.tape is not self:
                raise ValueError(f"{op}: inputs must be variables of this tape")
        vals = [self.nodes[v.id].value for v in inputs]
        try:
            out, cache = OPS[op].forward(vals, attrs)
        except (ValueError, IndexError) as exc:
            raise ShapeMismatch(f"{op}: {exc}") from exc
        req = any(self.nodes[v.id].requires_grad for v in inputs)
        return self._push(_Node(op, tuple(v.id for v in inputs), np.asarray(out, dtype=float), attrs, cache, req))

    def backward(self, out: Var) -> "Gradients":
        root = self.nodes[out.id]
        if root.value.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")
        grads: list[np.ndarray | None] = [None] * (out.id + 1)
        grads[out.id] = np.ones_like(root.value)
        for i in range(out.id, -1, -1):
            node = self.nodes[i]
            g = grads[i]
            if g is None or node.op is None or not node.requires_grad:
                continue
            vals = [self.nodes[j].value for j in node.inputs]
            local = OPS[node.op].backward(g, vals, node.value, node.cache, node.attrs)
            for j, gj in zip(node.inputs, local):
                if gj is None or not self.nodes[j].requires_grad:
                    continue
                gj = np.asarray(gj, dtype=float).reshape(self.nodes[j].value.shape)
                grads[j] = gj if grads[j] is None else grads[j] + gj
        leaves = {}
        for i, node in enumerate(self.nodes):
            if node.op is None and node.requires_grad:
                g = grads[i] if i < len(grads) else None
                leaves[i] = np.zeros_like(node.value) if g is None else g
        return Gradients(self, leaves)


class Gradients:
    def __init__(self, tape, by_id):
        self._tape = tape
        self._by_id = by_id

    def __getitem__(self, var: Var) -> np.ndarray:
        return self._by_id[var.id]

    def __contains__(self, var: Var) -> bool:
        return var.id in self._by_id


# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(g, shape):
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _same_shape(*vals):
    shapes = {np.shape(v) for v in vals}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch {sorted(shapes)}")


# ---------------------------------------------------------------------------
# elementwise and structural


@register("add")
class _Add:
    def forward(vals, attrs):
        np.broadcast_shapes(vals[0].shape, vals[1].shape)
        return vals[0] + vals[1], None

    def backward(g, vals, out, cache, attrs):
        return _unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)


@register("sub")
class _Sub:
    def forward(vals, attrs):
        np.broadcast_shapes(vals[0].shape, vals[1].shape)
        return vals[0] - vals[1], None

    def backward(g, vals, out, cache, attrs):
        return _unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape)


@register("mul")
class _Mul:
    def forward(vals, attrs):
        np.broadcast_shapes(vals[0].shape, vals[1].shape)
        return vals[0] * vals[1], None

    def backward(g, vals, out, cache, attrs):
        return _unbroadcast(g * vals[1], vals[0].shape), _unbroadcast(g * vals[0], vals[1].shape)


@register("scale")
class _Scale:
    def forward(vals, attrs):
        return attrs["c"] * vals[0], None

    def backward(g, vals, out, cache, attrs):
        return (attrs["c"] * g,)


@register("sum")
class _Sum:
    def forward(vals, attrs):
        return np.sum(vals[0], axis=attrs.get("axis")), None

    def backward(g, vals, out, cache, attrs):
        axis = attrs.get("axis")
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, vals[0].shape),)


@register("mean")
class _Mean:
    def forward(vals, attrs):
        return np.mean(vals[0], axis=attrs.get("axis")), None

    def backward(g, vals, out, cache, attrs):
        axis = attrs.get("axis")
        n = vals[0].size if axis is None else np.prod([vals[0].shape[a] for a in np.atleast_1d(axis)])
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, vals[0].shape) / n,)


@register("reshape")
class _Reshape:
    def forward(vals, attrs):
        return vals[0].reshape(attrs["shape"]), None

    def backward(g, vals, out, cache, attrs):
        return (g.reshape(vals[0].shape),)


@register("slice")
class _Slice:
    def forward(vals, attrs):
        return vals[0][attrs["index"]], None

    def backward(g, vals, out, cache, attrs):
        full = np.zeros_like(vals[0])
        np.add.at(full, attrs["index"], g)
        return (full,)


@register("concat")
class _Concat:
    def forward(vals, attrs):
        axis = attrs.get("axis", -1)
        return np.concatenate(vals, axis=axis), [v.shape[axis] for v in vals]

    def backward(g, vals, out, sizes, attrs):
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=attrs.get("axis", -1)))


@register("weighted_sum")
class _WeightedSum:
    def forward(vals, attrs):
        w = attrs["weights"]
        if len(w) != len(vals):
            raise ValueError(f"{len(w)} weights for {len(vals)} inputs")
        _same_shape(*vals)
        out = np.zeros_like(vals[0])
        for wi, v in zip(w, vals):
            out = out + wi * v
        return out, None

    def backward(g, vals, out, cache, attrs):
        return tuple(wi * g for wi in attrs["weights"])


@register("stop_gradient")
class _StopGradient:
    def forward(vals, attrs):
        return vals[0].copy(), None

    def backward(g, vals, out, cache, attrs):
        return (None,)


# ---------------------------------------------------------------------------
# network layers


@register("linear")
class _Linear:
    """``x @ W.T + b`` with x (..., in), W (out, in), optional b (out,)."""

    def forward(vals, attrs):
        x, w = vals[0], vals[1]
        if w.ndim != 2 or x.shape[-1] != w.shape[1]:
            raise ValueError(f"x {x.shape} incompatible with W {w.shape}")
        out = x @ w.T
        if len(vals) == 3:
            if vals[2].shape != (w.shape[0],):
                raise ValueError(f"bias {vals[2].shape} does not match W {w.shape}")
            out = out + vals[2]
        return out, None

    def backward(g, vals, out, cache, attrs):
        x, w = vals[0], vals[1]
        g2 = g.reshape(-1, w.shape[0])
        x2 = x.reshape(-1, w.shape[1])
        grads = [g @ w, g2.T @ x2]
        if len(vals) == 3:
            grads.append(g2.sum(axis=0))
        return tuple(grads)


@register("leaky_relu")
class _LeakyRelu:
    def forward(vals, attrs):
        slope = attrs.get("slope", LEAKY_SLOPE)
        x = vals[0]
        return np.where(x > 0, x, slope * x), None

    def backward(g, vals, out, cache, attrs):
        slope = attrs.get("slope", LEAKY_SLOPE)
        return (np.where(vals[0] > 0, g, slope * g),)


@register("tanh")
class _Tanh:
    def forward(vals, attrs):
        return np.tanh(vals[0]), None

    def backward(g, vals, out, cache, attrs):
        return (g * (1.0 - out * out),)


@register("batch_norm")
class _BatchNorm:
    """Batch normalisation over axis 0 of a (B, F) input.

    ``mode="train"`` normalises with biased batch statistics (exposed through the
    node cache for running-average updates); ``mode="eval"`` uses the
    ``running_mean`` / ``running_var`` attributes.
    """

    def forward(vals, attrs):
        x, gamma, beta = vals
        if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise ValueError(f"x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
        eps = attrs.get("eps", BN_EPS)
        if attrs.get("mode", "train") == "train":
            mean = x.mean(axis=0)
            var = ((x - mean) ** 2).mean(axis=0)
        else:
            mean, var = attrs["running_mean"], attrs["running_var"]
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv
        return gamma * xhat + beta, {"mean": mean, "var": var, "inv": inv, "xhat": xhat}

    def backward(g, vals, out, cache, attrs):
        x, gamma, _ = vals
        xhat, inv = cache["xhat"], cache["inv"]
        g_gamma = (g * xhat).sum(axis=0)
        g_beta = g.sum(axis=0)
        gx_hat = g * gamma
        if attrs.get("mode", "train") == "train":
            n = x.shape[0]
            gx = inv / n * (n * gx_hat - gx_hat.sum(axis=0) - xhat * (gx_hat * xhat).sum(axis=0))
        else:
            gx = gx_hat * inv
        return gx, g_gamma, g_beta


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@register("softmax_ce")
class _SoftmaxCE:
    """Per-sample cross-entropy from logits (B, C) and integer ``labels`` (B,)."""

    def forward(vals, attrs):
        logits = vals[0]
        labels = np.asarray(attrs["labels"], dtype=np.int64)
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ValueError(f"logits {logits.shape} vs labels {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
            raise ValueError("label outside [0, C)")
        logp = _log_softmax(logits)
        cw = attrs.get("class_weights")
        w = np.ones(len(labels)) if cw is None else np.asarray(cw, dtype=float)[labels]
        return -w * logp[np.arange(len(labels)), labels], (logp, w, labels)

    def backward(g, vals, out, cache, attrs):
        logp, w, labels = cache
        p = np.exp(logp)
        p[np.arange(len(labels)), labels] -= 1.0
        return ((g * w)[:, None] * p,)


@register("mse")
class _Mse:
    def forward(vals, attrs):
        _same_shape(*vals)
        d = vals[0] - vals[1]
        return np.mean(d * d), d

    def backward(g, vals, out, d, attrs):
        gd = 2.0 * g * d / d.size
        return gd, -gd


@register("sqdist")
class _SqDist:
    """Sum of squared differences over ``axes`` (default: all)."""

    def forward(vals, attrs):
        _same_shape(*vals)
        d = vals[0] - vals[1]
        return np.sum(d * d, axis=attrs.get("axes")), d

    def backward(g, vals, out, d, attrs):
        axes = attrs.get("axes")
        if axes is not None:
            g = np.expand_dims(g, axes)
        gd = 2.0 * g * d
        return gd, -gd


# ---------------------------------------------------------------------------
# geometry


@register("rodrigues_rotate")
class _RodriguesRotate:
    """Rotate points (..., N, 3) about ``pivot`` by axis-angle vectors (..., 3)."""

    def forward(vals, attrs):
        theta, pts = vals
        if theta.shape[-1] != 3 or pts.shape[-1] != 3 or theta.shape[:-1] != pts.shape[:-2]:
            raise ValueError(f"theta {theta.shape} vs points {pts.shape}")
        pivot = np.asarray(attrs.get("pivot", np.zeros(3)), dtype=float)
        local = pts - pivot
        delta = rodrigues_delta(theta)
        return pts + local @ np.swapaxes(delta, -1, -2), (local, delta)

    def backward(g, vals, out, cache, attrs):
        local, delta = cache
        theta = vals[0]
        g_pts = g + g @ delta
        d_rot = rodrigues_grad(theta)  # (..., a, i, j)
        g_theta = np.einsum("...ni,...aij,...nj->...a", g, d_rot, local)
        return g_theta, g_pts


@register("lbs_blend")
class _LbsBlend:
    """``w * rotated + (1 - w) * rest`` with per-vertex weights ``w`` (N,)."""

    def forward(vals, attrs):
        rot, rest = vals
        _same_shape(rot, rest)
        w = np.asarray(attrs["weights"], dtype=float)[:, None]
        if w.shape[0] != rot.shape[-2]:
            raise ValueError(f"{w.shape[0]} weights for {rot.shape[-2]} vertices")
        return w * rot + (1.0 - w) * rest, w

    def backward(g, vals, out, w, attrs):
        return w * g, (1.0 - w) * g


@register("blend")
class _Blend:
    """Blendshape displacement: coefficients (..., D) times basis (N, 3, D)."""

    def forward(vals, attrs):
        basis = attrs["basis"]
        if vals[0].shape[-1] != basis.shape[-1]:
            raise ValueError(f"{vals[0].shape[-1]} coefficients for {basis.shape[-1]} basis vectors")
        return np.einsum("...d,nkd->...nk", vals[0], basis), None

    def backward(g, vals, out, cache, attrs):
        return (np.einsum("...nk,nkd->...d", g, attrs["basis"]),)


@register("embed")
class _Embed:
    """Fixed linear combination of vertices: matrix (K, N) applied to (..., N, 3)."""

    def forward(vals, attrs):
        m = attrs["matrix"]
        if vals[0].shape[-2] != m.shape[1]:
            raise ValueError(f"matrix {m.shape} vs vertices {vals[0].shape}")
        return m @ vals[0], None

    def backward(g, vals, out, cache, attrs):
        return (attrs["matrix"].T @ g,)


@register("project")
class _Project:
    """Weak perspective: points (..., N, 3), cameras (..., 3) -> (..., N, 2)."""

    def forward(vals, attrs):
        pts, cam = vals
        if pts.shape[-1] != 3 or cam.shape[-1] != 3 or cam.shape[:-1] != pts.shape[:-2]:
            raise ValueError(f"points {pts.shape} vs cameras {cam.shape}")
        s = cam[..., 0, None, None]
        t = cam[..., None, 1:3]
        return s * pts[..., :2] + t, None

    def backward(g, vals, out, cache, attrs):
        pts, cam = vals
        g_pts = np.zeros_like(pts)
        g_pts[..., :2] = cam[..., 0, None, None] * g
        g_cam = np.empty_like(cam)
        g_cam[..., 0] = np.einsum("...nk,...nk->...", g, pts[..., :2])
        g_cam[..., 1:3] = g.sum(axis=-2)
        return g_pts, g_cam


# ---------------------------------------------------------------------------
# verification


def numeric_grad(fn, x, h=1e-5):
    """Central-difference gradient of a scalar function of one array."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = fn(x)
        x[idx] = orig - h
        fm = fn(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)
