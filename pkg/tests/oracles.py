"""Naive reference implementations shared by the tests."""
import numpy as np


def seg_dist2(p, a, b):
    d = b - a
    t = 0.0 if d @ d == 0 else np.clip((p - a) @ d / (d @ d), 0.0, 1.0)
    q = a + t * d
    return (p - q) @ (p - q)


def tri_dist2(p, a, b, c):
    """Plane projection if inside, else nearest edge."""
    n = np.cross(b - a, c - a)
    nn = n @ n
    if nn > 0:
        q = p - ((p - a) @ n) / nn * n
        ins = [np.cross(y - x, q - x) @ n for x, y in ((a, b), (b, c), (c, a))]
        if min(ins) >= 0:
            return (p - q) @ (p - q)
    return min(seg_dist2(p, a, b), seg_dist2(p, b, c), seg_dist2(p, c, a))


def brute(points, verts, faces):
    return np.array([min(tri_dist2(p, *verts[f]) for f in faces) for p in points])


def central_diff(fn, x, h=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-8)
    return float(np.abs(a - b).max(initial=0) / scale)


def check_tape_grads(build, inputs, h=1e-6):
    """Largest relative error between tape gradients and central differences.

    ``build(tape, vars)`` records a scalar from leaves made of ``inputs``.
    """
    from morphfit.grad import Tape

    tape = Tape()
    vs = [tape.leaf(x) for x in inputs]
    out = build(tape, vs)
    grads = tape.backward(out)
    worst = 0.0
    for i, x in enumerate(inputs):
        def fn(xi, i=i):
            t = Tape()
            args = [t.leaf(xi if j == i else inputs[j]) for j in range(len(inputs))]
            return float(build(t, args).value)
        worst = max(worst, rel_err(grads[vs[i]], central_diff(fn, x, h)))
    return worst


# --- metric oracles: plain Python loops, sample formulas written out ---------

def naive_pcc(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / (sxx * syy) ** 0.5


def naive_ccc(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    vx = sum((a - mx) ** 2 for a in x) / n
    vy = sum((b - my) ** 2 for b in y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    return 2 * cov / (vx + vy + (mx - my) ** 2)


def naive_rmse(x, y):
    return (sum((a - b) ** 2 for a, b in zip(x, y)) / len(x)) ** 0.5


def naive_sagr(x, y):
    return sum((a >= 0) == (b >= 0) for a, b in zip(x, y)) / len(x)


def naive_classification(pred, gt, n_classes):
    present = [c for c in range(n_classes) if any(g == c for g in gt)]
    acc = sum(p == g for p, g in zip(pred, gt)) / len(gt)
    precs, f1s, recalls = [], [], {}
    for c in present:
        tp = sum(p == c and g == c for p, g in zip(pred, gt))
        npred = sum(p == c for p in pred)
        nsup = sum(g == c for g in gt)
        prec = tp / npred if npred else 0.0
        rec = tp / nsup
        recalls[c] = rec
        precs.append(prec)
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return acc, sum(precs) / len(precs), sum(f1s) / len(f1s), recalls


def naive_ced_auc(errors, tau, steps=200000):
    """Midpoint Riemann sum of the empirical CDF on [0, tau], divided by tau."""
    e = np.sort(np.asarray(errors, float))
    t = (np.arange(steps) + 0.5) * tau / steps
    cdf = np.searchsorted(e, t, side="right") / len(e)
    return float(cdf.mean())
