import numpy as np
import pytest

from morphfit.fitter import (FitConfig, FitConfigurationError, FitWeights, _FrozenProblem, fit, fit_objective)
from morphfit.mesh import Mesh
from morphfit.model import MESH_BLOCKS, ParamVector, embed_landmarks, forward, random_params
from morphfit.scanprep import Scan
from oracles import brute


def scan_from(asset, seed, n=1500, pose_scale=0.1):
    rng = np.random.default_rng(seed)
    p = random_params(asset, rng, pose_scale=pose_scale)
    v = forward(asset, p)
    pts, _, _ = Mesh(v, asset.faces).sample_surface(n, rng)
    return p, Scan(pts, embed_landmarks(asset, v))


def test_weights_parse():
    w = FitWeights.parse("2.0,0.1,1e-4,1e-3,1e-4")
    assert w == FitWeights()
    with pytest.raises(FitConfigurationError):
        FitWeights.parse("1,2,3")
    with pytest.raises(FitConfigurationError):
        FitWeights(w_scan=-1.0)


def test_config_validation():
    with pytest.raises(FitConfigurationError):
        FitConfig(max_inner_iters=0)
    with pytest.raises(FitConfigurationError):
        FitConfig(rel_tol=0.0)


def test_objective_at_truth_is_regulariser_only(small_asset):
    p, scan = scan_from(small_asset, 0)
    e, terms = fit_objective(small_asset, p, scan, FitWeights())
    assert terms["scan"] < 1e-20 and terms["lmk"] < 1e-20
    reg = 1e-4 * (p.beta @ p.beta) + 1e-3 * (p.theta_jaw @ p.theta_jaw + p.theta_head @ p.theta_head) \
        + 1e-4 * (p.psi_exp @ p.psi_exp + p.psi_eye @ p.psi_eye)
    assert e == pytest.approx(reg, rel=1e-9)


def test_objective_matches_brute_force_distances(small_asset):
    _, scan = scan_from(small_asset, 1, n=40)
    q = ParamVector.for_asset(small_asset)
    _, terms = fit_objective(small_asset, q, scan, FitWeights())
    v = forward(small_asset, q)
    ref = brute(scan.points, v, small_asset.faces).mean()
    assert terms["scan"] == pytest.approx(ref, rel=1e-9)


@pytest.mark.parametrize("plane", [False, True])
def test_frozen_jacobian_matches_finite_differences(small_asset, plane):
    p, scan = scan_from(small_asset, 2, n=50)
    rng = np.random.default_rng(0)
    faces = rng.integers(len(small_asset.faces), size=50)
    bary = rng.dirichlet(np.ones(3), size=50)
    normals = rng.normal(size=(50, 3)) if plane else None
    prob = _FrozenProblem(small_asset, scan, FitWeights(), MESH_BLOCKS, faces, bary, normals)
    q = random_params(small_asset, rng, pose_scale=0.3)
    jac = prob.jacobian(q)
    x0 = q.mesh_vector()
    h = 1e-6
    for j in range(len(x0)):
        e = np.zeros_like(x0)
        e[j] = h
        fd = (prob.residual(q.with_mesh_vector(x0 + e)) - prob.residual(q.with_mesh_vector(x0 - e))) / (2 * h)
        np.testing.assert_allclose(jac[:, j], fd, atol=1e-6)


def test_fit_recovers_expression_and_trace_is_monotone(small_asset):
    p, scan = scan_from(small_asset, 3)
    q, trace = fit(small_asset, scan)
    assert trace.is_monotone()
    assert trace.entries[0].stage == "init"
    assert {e.stage for e in trace.entries[1:]} <= {"rigid", "full"}
    assert np.mean((q.psi_exp - p.psi_exp) ** 2) < 1e-3
    assert trace.entries[-1].terms["scan"] < 1e-3


def test_fit_without_landmarks_needs_zero_weight(small_asset):
    _, scan = scan_from(small_asset, 4)
    bare = Scan(scan.points)
    with pytest.raises(FitConfigurationError):
        fit(small_asset, bare)
    q, trace = fit(small_asset, bare, FitWeights(w_lmk=0.0), FitConfig(max_outer_iters=3))
    assert trace.is_monotone()


def test_fit_rejects_empty_scan_and_bad_landmarks(small_asset):
    with pytest.raises(ValueError):
        fit(small_asset, Scan(np.zeros((0, 3)), np.zeros((83, 3))))
    with pytest.raises(FitConfigurationError):
        fit(small_asset, Scan(np.ones((5, 3)), np.zeros((10, 3))))


def test_fit_zero_iterations_returns_init(small_asset):
    _, scan = scan_from(small_asset, 5)
    q, trace = fit(small_asset, scan, config=FitConfig(max_outer_iters=0))
    assert np.array_equal(q.mesh_vector(), ParamVector.for_asset(small_asset).mesh_vector())
    assert len(trace.entries) == 1


def test_fit_is_deterministic(small_asset):
    _, scan = scan_from(small_asset, 6)
    cfg = FitConfig(max_outer_iters=6)
    a, ta = fit(small_asset, scan, config=cfg)
    b, tb = fit(small_asset, scan, config=cfg)
    assert np.array_equal(a.mesh_vector(), b.mesh_vector())
    assert ta.to_csv() == tb.to_csv()


def test_trace_csv_layout(small_asset):
    _, scan = scan_from(small_asset, 7)
    _, trace = fit(small_asset, scan, config=FitConfig(max_outer_iters=2))
    lines = trace.to_csv().splitlines()
    assert lines[0].startswith("iteration,stage,energy,term_scan")
    assert len(lines) == len(trace.entries) + 1
