import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphfit.grad import Tape
from morphfit.losses import (LossWeights, TermBundle, combine_2d, emo_loss, emo_loss_t, encoder_loss, encoder_loss_t,
                             l3d_gt, l3d_gt_t, lmk_loss, lmk_loss_t, make_yaw_mask, pdl_loss, pdl_loss_t,
                             photo_loss, pretrain_loss, pretrain_loss_t, reg_loss, reg_loss_t, region_loss)
from morphfit.model import ParamVector
from oracles import check_tape_grads

SEEDS = range(10)
TOL = 1e-5


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# numpy values


def test_l3d_and_lmk_values():
    assert l3d_gt([1.0, 2.0], [0.0, 0.0]) == 5.0
    assert lmk_loss([[0.0, 0.0], [1.0, 1.0]], [[3.0, 4.0], [1.0, 1.0]]) == 25.0
    with pytest.raises(ValueError):
        l3d_gt([1.0], [1.0, 2.0])


def test_emo_loss_value_and_validation():
    p = np.array([0.25, 0.75])
    val = emo_loss((0.5, -0.5, p), (0.0, 0.0, 1), lambda_r=2.0, lambda_c=3.0)
    assert val == pytest.approx(2 * 0.25 + 2 * 0.25 - 3 * math.log(0.75))
    with pytest.raises(ValueError):
        emo_loss((0, 0, [0.5, 0.6]), (0, 0, 0))
    with pytest.raises(ValueError):
        emo_loss((0, 0, [0.5, 0.5]), (0, 0, 2))
    with pytest.raises(ValueError):
        emo_loss((0, 0, [0.5, 0.5]), (1.5, 0, 0))


def test_emo_uniform_prediction_cross_entropy():
    p = np.full(7, 1 / 7)
    assert emo_loss((0.0, 0.0, p), (0.0, 0.0, 3)) == pytest.approx(math.log(7))


def test_yaw_mask_sides():
    sides = np.array([-1, 0, 1])
    mask = make_yaw_mask(sides)
    assert mask(0.0).tolist() == [1, 1, 1]
    assert mask(0.5).tolist() == [1, 1, 0]
    assert mask(-0.5).tolist() == [0, 1, 1]
    assert mask(math.pi / 9).tolist() == [1, 1, 1]


def test_pdl_ignores_hidden_landmarks():
    sides = np.array([1, -1])
    L = np.array([[0.0, 0.0], [0.0, 0.0]])
    Lv = np.array([[5.0, 0.0], [1.0, 0.0]])
    assert pdl_loss(L, Lv, 0.6, make_yaw_mask(sides)) == 1.0
    assert pdl_loss(L, Lv, 0.0, make_yaw_mask(sides)) == 26.0


def test_photo_and_region():
    a = np.zeros((2, 2, 3))
    b = np.ones((2, 2, 3))
    assert photo_loss(a, b) == 1.0
    mask = np.array([[1, 0], [0, 0]])
    assert region_loss(a, b, mask) == 3.0
    assert region_loss(a, b, np.zeros((2, 2))) == 0.0
    with pytest.raises(ValueError):
        region_loss(a, b, np.zeros((3, 3)))


def test_combine_2d_missing_terms_count_zero():
    bundle = TermBundle({"photo": 1.0, "lmk": 2.0, "pdl": None})
    assert combine_2d(bundle) == 10 * 1.0 + 10 * 2.0
    assert bundle.absent(("photo", "perc", "pdl")) == ["perc", "pdl"]


def test_encoder_loss_breakdown_and_warmup():
    w = LossWeights()
    bundle = TermBundle({"lmk": 1.0, "l3d": 2.0, "emo": 0.5, "reg": 0.25})
    total, parts = encoder_loss(bundle, w)
    assert parts == {"2d": 10.0, "3d": 2.0, "emo": 2.5, "reg": 0.25}
    assert total == pytest.approx(14.75)
    total_w, parts_w = encoder_loss(bundle, w, lambda_3d=w.lambda_3d_warmup)
    assert parts_w["3d"] == 10.0


def test_reg_and_pretrain_values():
    p = ParamVector(beta=[1.0, 0.0], psi_exp=[0.0, 2.0])
    base = ParamVector(beta=[0.0, 0.0], psi_exp=[0.0, 0.0])
    assert reg_loss(p, base, 100.0, 0.01) == pytest.approx(100.0 + 0.04)
    k = np.zeros((3, 2))
    assert pretrain_loss(k, k + 1, k, [1.0], [0.0]) == pytest.approx(100 * 6 + 10)


def test_loss_weights_io(tmp_path):
    w = LossWeights()
    assert w.w_2d == (10.0, 10.0, 10.0, 100.0, 500.0)
    assert (w.lambda_3d, w.lambda_3d_warmup, w.lambda_emo) == (1.0, 5.0, 5.0)
    assert (w.lambda_shape_reg, w.lambda_expr_reg) == (100.0, 1e-2)
    path = tmp_path / "w.json"
    path.write_text(json.dumps({"lambda_emo": 0.0}))
    assert LossWeights.load(path).lambda_emo == 0.0
    with pytest.raises(ValueError, match="unknown"):
        LossWeights.from_dict({"lambda_bogus": 1.0})
    with pytest.raises(ValueError):
        LossWeights(lambda_3d=-1.0)
    with pytest.raises(ValueError):
        LossWeights(w_2d=(1.0, 2.0))
    assert LossWeights.from_dict(w.to_dict()) == w


def test_term_bundle_validation():
    with pytest.raises(ValueError):
        TermBundle({"lmk": -1.0})
    with pytest.raises(ValueError):
        TermBundle({"lmk": float("nan")})


# ---------------------------------------------------------------------------
# tape variants: same values, gradients against central differences


@pytest.mark.parametrize("seed", SEEDS)
def test_l3d_tape(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=8), rng.normal(size=8)
    tape = Tape()
    assert float(l3d_gt_t(tape, tape.leaf(a), tape.leaf(b)).value) == pytest.approx(l3d_gt(a, b))
    assert check_tape_grads(lambda t, v: l3d_gt_t(t, *v), [a, b]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_emo_tape(seed):
    rng = np.random.default_rng(seed)
    va_hat, logits = rng.uniform(-1, 1, (5, 2)), rng.normal(size=(5, 7))
    va, labels = rng.uniform(-1, 1, (5, 2)), rng.integers(7, size=5)
    tape = Tape()
    t = emo_loss_t(tape, tape.leaf(va_hat), tape.leaf(logits), va, labels, 1.5, 0.5)
    p = softmax(logits)
    ref = np.mean([emo_loss((va_hat[i, 0], va_hat[i, 1], p[i]), (va[i, 0], va[i, 1], labels[i]), 1.5, 0.5)
                   for i in range(5)])
    assert float(t.value) == pytest.approx(ref, rel=1e-12)
    assert check_tape_grads(lambda tp, v: emo_loss_t(tp, v[0], v[1], va, labels, 1.5, 0.5), [va_hat, logits]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_landmark_tapes(seed):
    rng = np.random.default_rng(seed)
    L, Lv = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    sides = rng.integers(-1, 2, size=6)
    yaw = rng.uniform(-1, 1)
    mask = make_yaw_mask(sides)(yaw)
    tape = Tape()
    assert float(lmk_loss_t(tape, tape.leaf(L), tape.leaf(Lv)).value) == pytest.approx(lmk_loss(L, Lv))
    assert float(pdl_loss_t(tape, tape.leaf(L), tape.leaf(Lv), mask).value) == pytest.approx(
        pdl_loss(L, Lv, yaw, make_yaw_mask(sides)))
    assert check_tape_grads(lambda t, v: lmk_loss_t(t, *v), [L, Lv]) < TOL
    assert check_tape_grads(lambda t, v: pdl_loss_t(t, v[0], v[1], mask), [L, Lv]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_reg_tape_stop_gradient(seed):
    rng = np.random.default_rng(seed)
    beta, psi, bb, pb = (rng.normal(size=4) for _ in range(4))
    tape = Tape()
    vs = [tape.leaf(x) for x in (beta, psi, bb, pb)]
    out = reg_loss_t(tape, *vs, 100.0, 0.01)
    ref = reg_loss(ParamVector(beta=beta, psi_exp=psi), ParamVector(beta=bb, psi_exp=pb), 100.0, 0.01)
    assert float(out.value) == pytest.approx(ref)
    g = tape.backward(out)
    assert np.array_equal(g[vs[2]], np.zeros(4)) and np.array_equal(g[vs[3]], np.zeros(4))
    np.testing.assert_allclose(g[vs[0]], 200.0 * (beta - bb))
    # quadratic: central differences are exact for any step, so a wide one avoids round-off
    assert check_tape_grads(lambda t, v: reg_loss_t(t, v[0], v[1], t.const(bb), t.const(pb), 100.0, 0.01),
                            [beta, psi], h=1e-2) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_pretrain_tape(seed):
    rng = np.random.default_rng(seed)
    k, kmp, kfan = (rng.normal(size=(5, 2)) for _ in range(3))
    b, br = rng.normal(size=3), rng.normal(size=3)
    tape = Tape()
    out = pretrain_loss_t(tape, *(tape.leaf(x) for x in (k, kmp, kfan, b, br)))
    assert float(out.value) == pytest.approx(pretrain_loss(k, kmp, kfan, b, br))
    assert check_tape_grads(lambda t, v: pretrain_loss_t(t, *v), [k, kmp, kfan, b, br]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_encoder_total_tape(seed):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(0.1, 2.0, size=5)
    names = ("lmk", "pdl", "l3d", "emo", "reg")
    w = LossWeights()

    def build(tape, vs):
        return encoder_loss_t(tape, dict(zip(names, vs)), w, lambda_3d=w.lambda_3d_warmup)

    tape = Tape()
    out = build(tape, [tape.leaf(v) for v in vals])
    ref, _ = encoder_loss(TermBundle(dict(zip(names, vals))), w, lambda_3d=w.lambda_3d_warmup)
    assert float(out.value) == pytest.approx(ref)
    assert check_tape_grads(build, [np.array(v) for v in vals]) < TOL


def test_encoder_total_without_terms_is_zero():
    tape = Tape()
    assert float(encoder_loss_t(tape, {}, LossWeights()).value) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=5, max_size=5))
def test_encoder_loss_is_sum_of_breakdown(vals):
    bundle = TermBundle(dict(zip(("photo", "lmk", "l3d", "emo", "reg"), vals)))
    total, parts = encoder_loss(bundle, LossWeights())
    assert total == pytest.approx(sum(parts.values()))
    assert total >= 0
