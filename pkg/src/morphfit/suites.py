"""Seeded synthetic suites with planted structure for the training checks."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .losses import LossWeights
from .model import (ModelAsset, ParamVector, embed_landmarks, forward, forward_jacobian, project,
                    random_params, synth_model)
from .trainer import (EncoderSample, TrainConfig, encode_samples, head_features, psi_mse,
                      train_emotion_head, train_toy_encoder)


def separable_clusters(seed: int, n_per_class: int = 500, dim: int = 23, margin: float = 0.5):
    """Two classes split by a random hyperplane with a hard margin of ``2 * margin``."""
    rng = np.random.default_rng(seed)
    normal = rng.normal(size=dim)
    normal /= np.linalg.norm(normal)
    x = rng.normal(size=(2 * n_per_class, dim))
    labels = np.repeat([0, 1], n_per_class)
    z = x @ normal
    side = np.where(labels == 0, 1.0, -1.0)
    x += np.outer(side * (margin + np.abs(z)) - z, normal)
    perm = rng.permutation(len(x))
    return x[perm], np.zeros((len(x), 2)), labels[perm]


def linear_va(seed: int, n: int = 1000, dim: int = 23, noise: float = 0.05):
    """VA as a fixed linear map of the features plus Gaussian noise; class = VA quadrant."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, dim))
    a = rng.normal(size=(2, dim))
    a /= 2.5 * np.linalg.norm(a, axis=1, keepdims=True)  # VA std 0.4
    va = np.clip(x @ a.T + noise * rng.normal(size=(n, 2)), -1.0, 1.0)
    labels = 2 * (va[:, 0] >= 0) + (va[:, 1] >= 0)
    return x, va, labels.astype(np.int64)


@dataclass
class EncoderSuite:
    asset: ModelAsset
    train: list
    test: list
    probe: list
    n_classes: int
    val: list = field(default_factory=list)


def landmark_response(asset: ModelAsset) -> np.ndarray:
    """Singular values of the rest-pose 2D landmark response to psi_exp (unit camera scale)."""
    from .model import embedding_matrix

    jac = forward_jacobian(asset, ParamVector.for_asset(asset))["psi_exp"]
    m = embedding_matrix(asset, asset.lmk_faces, asset.lmk_bary)
    lm = np.einsum("nv,vkd->nkd", m, jac)[:, :2]
    return np.linalg.svd(lm.reshape(-1, lm.shape[-1]), compute_uv=False)


def planted_encoder_suite(seed: int = 0, dims=(642, 10, 8), n_gt: int = 300, n_affect: int = 900,
                          n_test: int = 400, n_probe: int = 900, n_val: int = 200, separation: float = 1.5,
                          subtle: float = 0.5, det_noise: float = 5e-4) -> EncoderSuite:
    """Landmark samples generated from known expressions with subtle class-bearing bases.

    The first two expression bases are scaled down by ``subtle`` so they move
    the landmarks less than the rest (while staying well above the detection noise).  Four
    classes sit at the corners of a square in those two coefficients; the other
    coefficients are nuisance.  Valence and arousal are the two class coordinates
    scaled into [-1, 1].  Base predictions carry the exact shape, head pose and
    camera, and a neutral expression.  ``val`` is a held-out labelled split
    used only for checkpoint selection.
    """
    asset = synth_model(seed, dims)
    basis = asset.expr_basis.copy()
    basis[:, :, :2] *= subtle
    asset = replace(asset, expr_basis=basis)
    rng = np.random.default_rng(seed + 1000)
    weak = np.eye(dims[2])[:, :2]
    corners = np.array([[-1, -1], [-1, 1], [1, -1], [1, 1]], dtype=float)
    ne = dims[2]

    def draw(n, with_gt, with_affect):
        out = []
        for _ in range(n):
            k = int(rng.integers(4))
            coord = separation * corners[k] + 0.3 * rng.normal(size=2)
            nuisance = rng.normal(size=ne)
            nuisance -= weak @ (weak.T @ nuisance)
            psi = weak @ coord + nuisance
            p = random_params(asset, rng, scale=0.5, pose_scale=0.05)
            p.psi_exp = psi
            p.theta_head[1] = rng.uniform(-0.5, 0.5)  # yaw spread crosses the visibility threshold
            lmk = project(p, embed_landmarks(asset, forward(asset, p)))
            lmk = lmk + det_noise * rng.normal(size=lmk.shape)
            base = p.copy()
            base.psi_exp = np.zeros(ne)
            base.psi_eye = np.zeros(2)
            base.theta_jaw = np.zeros(3)
            va = tuple(np.clip(coord / (separation + 1.0), -1.0, 1.0))
            out.append(EncoderSample(lmk, base, psi if with_gt else None,
                                     (va[0], va[1], k) if with_affect else None))
        return out

    train = draw(n_gt, True, False) + draw(n_affect, False, True)
    test = draw(n_test, True, True)
    probe = draw(n_probe, True, True)
    val = draw(n_val, True, True)
    return EncoderSuite(asset, train, test, probe, 4, val)


ABLATIONS = {
    "baseline": {"lambda_3d": 0.0, "lambda_3d_warmup": 0.0, "lambda_emo": 0.0},
    "with_3d": {"lambda_emo": 0.0},
    "with_emo": {"lambda_3d": 0.0, "lambda_3d_warmup": 0.0},
    "combined": {},
}


def probe_accuracy(suite: EncoderSuite, run, config: TrainConfig) -> float:
    """Held-out accuracy of a fresh affect head trained on the encoder's predictions."""
    def feats(samples):
        return np.stack([head_features(p) for p in encode_samples(run.encoder, suite.asset, samples)])

    labels = lambda ss: np.array([s.affect[2] for s in ss])  # noqa: E731
    va = lambda ss: np.array([s.affect[:2] for s in ss])  # noqa: E731
    head, _ = train_emotion_head(feats(suite.probe), va(suite.probe), labels(suite.probe), config,
                                 n_classes=suite.n_classes)
    from .trainer import head_forward
    x = feats(suite.test)
    nb = suite.asset.dims[1]
    _, _, p = head_forward(head, x[:, :nb], x[:, nb:])
    return float(np.mean(np.argmax(p, axis=1) == labels(suite.test)))


def run_ablation(suite: EncoderSuite, base_weights: LossWeights = LossWeights(),
                 config: TrainConfig = TrainConfig(epochs=30), probe_config: TrainConfig | None = None,
                 names=tuple(ABLATIONS)) -> dict:
    """Train one encoder per ablation and report held-out psi MSE and probe accuracy.

    Every run keeps its best epoch on ``suite.val`` (same rule for all ablations).
    """
    probe_config = probe_config or TrainConfig(epochs=30, seed=config.seed)
    out = {}
    for name in names:
        w = LossWeights.from_dict({**base_weights.to_dict(), **ABLATIONS[name]})
        run = train_toy_encoder(suite.asset, suite.train, w, config, n_classes=suite.n_classes,
                                val_samples=suite.val or None)
        out[name] = {"psi_mse": psi_mse(run.encoder, suite.asset, suite.test),
                     "accuracy": probe_accuracy(suite, run, probe_config),
                     "history": run.history}
    return out
