"""Acceptance criteria 1-9, each at its stated tolerance and time budget.

Every test prints one ``criterion N: PASS|FAIL`` line (visible under ``pytest -v``)
with its runtime and the headline numbers.
"""
import contextlib
import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

import test_grad
import test_losses
from morphfit.cli import main as cli_main
from morphfit.dataset import SubjectMeta, params_to_dict, stratified_split
from morphfit.fitter import FitWeights, fit
from morphfit.grad import OPS
from morphfit.mesh import Bvh, Mesh
from morphfit.metrics import ccc, ced_auc, classification_metrics, geometry_errors, param_mse, pcc, rmse, sagr
from morphfit.model import ParamVector, embed_keypoints, embed_landmarks, forward, random_params, synth_model
from morphfit.scanprep import Scan, prepare_scan, synth_head_scan
from morphfit.suites import linear_va, planted_encoder_suite, run_ablation, separable_clusters
from morphfit.trainer import TrainConfig, train_emotion_head
from oracles import naive_ccc, naive_classification, naive_pcc, naive_rmse, naive_sagr
from test_scanprep import inequality_oracle


@pytest.fixture
def criterion(capsys):
    """Context manager factory: times the block and prints the pass/fail line."""
    @contextlib.contextmanager
    def run(num, title, budget=None):
        info = {}
        t0 = time.perf_counter()
        ok = False
        try:
            yield info
            ok = True
        finally:
            dt = time.perf_counter() - t0
            over = budget is not None and dt >= budget
            detail = ", ".join(f"{k}={v}" for k, v in info.items())
            limit = f" < {budget:g} s" if budget else ""
            with capsys.disabled():
                print(f"\ncriterion {num}: {'PASS' if ok and not over else 'FAIL'}  {title}  "
                      f"[{dt:.2f} s{limit}]" + (f"  {detail}" if detail else ""))
        assert not over, f"criterion {num} took {dt:.1f} s (budget {budget} s)"
    return run


# ---------------------------------------------------------------------------


def test_criterion_1_forward_model(criterion):
    with criterion(1, "forward model: template, linearity, rotation isometry", 5.0) as info:
        worst_lin = worst_iso = 0.0
        for seed in range(20):
            asset = synth_model(seed, (642, 10, 8))
            z = ParamVector.for_asset(asset)
            assert np.max(np.abs(forward(asset, z) - asset.template)) == 0.0

            rng = np.random.default_rng(seed)
            a, b = random_params(asset, rng, pose_scale=0.0), random_params(asset, rng, pose_scale=0.0)
            ab = ParamVector(beta=a.beta + b.beta, psi_exp=a.psi_exp + b.psi_exp, psi_eye=a.psi_eye + b.psi_eye,
                             cam=a.cam)
            t = asset.template
            lin = (forward(asset, ab) - t) - ((forward(asset, a) - t) + (forward(asset, b) - t))
            worst_lin = max(worst_lin, float(np.abs(lin).max()))

            p = random_params(asset, rng, pose_scale=0.4)
            flat = ParamVector(beta=p.beta, psi_exp=p.psi_exp, psi_eye=p.psi_eye, theta_jaw=p.theta_jaw, cam=p.cam)
            v_rot, v_flat = forward(asset, p), forward(asset, flat)
            idx = rng.choice(asset.n_verts, 200, replace=False)
            d_rot = np.linalg.norm(v_rot[idx, None] - v_rot[None, idx], axis=-1)
            d_flat = np.linalg.norm(v_flat[idx, None] - v_flat[None, idx], axis=-1)
            worst_iso = max(worst_iso, float(np.abs(d_rot - d_flat).max()))
        info.update(linearity=f"{worst_lin:.1e}", isometry=f"{worst_iso:.1e}")
        assert worst_lin < 1e-9 and worst_iso < 1e-9


def test_criterion_2_gradient_suite(criterion):
    with criterion(2, "gradients: all ops and losses vs central differences, stop-gradient zero", 60.0) as info:
        for name in sorted(OPS):
            test_grad.test_op_matches_finite_differences(name)
        for seed in test_losses.SEEDS:
            test_losses.test_l3d_tape(seed)
            test_losses.test_emo_tape(seed)
            test_losses.test_landmark_tapes(seed)
            test_losses.test_reg_tape_stop_gradient(seed)
            test_losses.test_pretrain_tape(seed)
            test_losses.test_encoder_total_tape(seed)
        info.update(ops=len(OPS), losses=6, seeds=len(test_losses.SEEDS))


def test_criterion_3_fitting_recovery(criterion):
    with criterion(3, "fitting recovery on 25 synthetic scans", 300.0) as info:
        asset = synth_model(1, (642, 10, 8))
        weights = FitWeights.parse("2.0,0.1,1e-4,1e-3,1e-4")
        psi_err, dists, bad_trace = [], [], 0
        for s in range(25):
            rng = np.random.default_rng(100 + s)
            gt = random_params(asset, rng, scale=1.0, pose_scale=0.1)
            verts = forward(asset, gt)
            pts, _, _ = Mesh(verts, asset.faces).sample_surface(3000, rng)
            params, trace = fit(asset, Scan(pts, embed_landmarks(asset, verts)), weights)
            psi_err.append((params.psi_exp - gt.psi_exp) ** 2)
            _, dist, _ = Bvh(Mesh(forward(asset, params), asset.faces)).query(pts)
            dists.append(float(np.mean(dist)))
            e = trace.energies()
            bad_trace += int(any(b > a for a, b in zip(e, e[1:])))
        psi_err = np.array(psi_err)
        info.update(worst_psi_mse=f"{psi_err.mean(axis=1).max():.1e}", worst_mean_dist=f"{max(dists):.1e} mm",
                    non_monotone=bad_trace)
        assert psi_err.mean(axis=1).max() < 1e-3 and psi_err.mean(axis=0).max() < 1e-3
        assert max(dists) < 0.05
        assert bad_trace == 0


def test_criterion_4_scan_prep(criterion):
    with criterion(4, "scan-prep crop: oracle set, landmarks kept, idempotent", 5.0) as info:
        asset = synth_model(1, (642, 10, 8))
        rng = np.random.default_rng(11)
        scan = synth_head_scan(asset, random_params(asset, rng, pose_scale=0.05), rng)
        cropped, plane = prepare_scan(scan)
        keep = inequality_oracle(scan.points, scan.landmarks83, plane.radii)
        assert np.array_equal(cropped.points, scan.points[keep])
        assert len(inequality_oracle(scan.landmarks83, scan.landmarks83, plane.radii)) == 83
        again, _ = prepare_scan(cropped)
        assert np.array_equal(again.points, cropped.points)
        info.update(kept=f"{len(keep)}/{len(scan.points)}")


def test_criterion_5_metric_oracles(criterion, small_asset):
    with criterion(5, "metrics vs naive oracles on 100 instances, CCC shift = 2/3", 30.0) as info:
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(2, 60))
            x = rng.normal(size=n)
            y = 0.5 * x + rng.normal(size=n) + rng.normal()
            xl, yl = x.tolist(), y.tolist()
            worst = max(worst, abs(pcc(x, y) - naive_pcc(xl, yl)), abs(ccc(x, y) - naive_ccc(xl, yl)),
                        abs(rmse(x, y) - naive_rmse(xl, yl)), abs(sagr(x, y) - naive_sagr(xl, yl)))

            gt = rng.integers(7, size=n)
            pred = np.where(rng.random(n) < 0.6, gt, rng.integers(7, size=n))
            cm = classification_metrics(pred, gt, 7)
            acc, prec, f1, _ = naive_classification(pred.tolist(), gt.tolist(), 7)
            worst = max(worst, abs(cm.accuracy - acc), abs(cm.precision_macro - prec), abs(cm.f1_macro - f1))

            pv = [ParamVector(beta=rng.normal(size=4), psi_exp=rng.normal(size=6), theta_jaw=rng.normal(size=3))
                  for _ in range(4)]
            ref = np.mean([np.mean(np.square(np.r_[a.psi_exp - b.psi_exp, a.theta_jaw - b.theta_jaw]))
                           for a, b in zip(pv[:2], pv[2:])])
            ref_loop = sum(sum((u - v) ** 2 for u, v in zip(list(a.psi_exp) + list(a.theta_jaw),
                                                             list(b.psi_exp) + list(b.theta_jaw))) / 9
                           for a, b in zip(pv[:2], pv[2:])) / 2
            worst = max(worst, abs(param_mse(pv[:2], pv[2:]) - ref_loop), abs(ref - ref_loop))

            t = small_asset.template
            r = [t + rng.normal(size=t.shape) for _ in range(2)]
            p = [m + rng.normal(scale=0.3, size=m.shape) for m in r]
            ge = geometry_errors(p, r, small_asset)
            kp = [sum(np.linalg.norm(np.subtract(a, b)) for a, b in zip(embed_keypoints(small_asset, pm),
                                                                          embed_keypoints(small_asset, rm))) / 49
                  for pm, rm in zip(p, r)]
            vx = [sum(np.linalg.norm(np.subtract(a, b)) for a, b in zip(pm, rm)) / len(pm) for pm, rm in zip(p, r)]
            worst = max(worst, abs(ge.keypoint_mean - sum(kp) / 2), abs(ge.vertex_mean - sum(vx) / 2))

            e = rng.exponential(size=int(rng.integers(1, 30)))
            exact = sum(max(0.0, 1.5 - v) for v in e) / len(e) / 1.5  # step-CDF integral
            worst = max(worst, abs(ced_auc(e, 1.5) - exact))
        shift = ccc([-1.0, 1.0], [0.0, 2.0])
        info.update(max_abs_diff=f"{worst:.1e}", ccc_shift=f"{shift:.15f}")
        assert worst < 1e-12
        assert abs(shift - 2.0 / 3.0) < 1e-12


def test_criterion_6_emotion_head(criterion):
    with criterion(6, "emotion head: separable acc >= 0.95, linear VA CCC >= 0.9", 180.0) as info:
        cfg = TrainConfig(epochs=50, lr=2e-3, batch_size=64, seed=0)
        x, va, y = separable_clusters(0)
        _, hist = train_emotion_head(x, va, y, cfg, n_classes=2)
        acc = max(h["val_accuracy"] for h in hist)
        x, va, y = linear_va(0)
        _, hist = train_emotion_head(x, va, y, cfg, n_classes=4)
        best = max(hist, key=lambda h: min(h["val_ccc_v"], h["val_ccc_a"]))
        info.update(sep_acc=f"{acc:.3f}", ccc_v=f"{best['val_ccc_v']:.3f}", ccc_a=f"{best['val_ccc_a']:.3f}")
        assert acc >= 0.95
        assert best["val_ccc_v"] >= 0.9 and best["val_ccc_a"] >= 0.9


def test_criterion_7_ablation_direction(criterion):
    seeds = (0, 1, 2)
    with criterion(7, "ablation direction on the planted encoder suite", 600.0) as info:
        runs = {s: run_ablation(planted_encoder_suite(s), config=TrainConfig(epochs=30, seed=s)) for s in seeds}
        mean = {name: (np.mean([runs[s][name]["psi_mse"] for s in seeds]),
                       np.mean([runs[s][name]["accuracy"] for s in seeds])) for name in runs[0]}
        info.update(**{k: f"psi={v[0]:.4f}/acc={v[1]:.3f}" for k, v in mean.items()})
        assert mean["with_3d"][0] < mean["baseline"][0]
        assert mean["with_emo"][1] > mean["baseline"][1]
        assert mean["combined"][0] <= mean["with_3d"][0]
        assert mean["combined"][1] >= mean["with_emo"][1]


def test_criterion_8_split(criterion):
    counts = {("White", "M"): 14, ("White", "F"): 9, ("Asian", "F"): 8, ("Black", "F"): 6,
              ("Asian", "M"): 2, ("Black", "M"): 2}
    subjects = [SubjectMeta(f"{r[0]}{g}{i:02d}", r, g) for (r, g), n in counts.items() for i in range(n)]
    with criterion(8, "41-subject split gives 29/6/6, one per stratum, deterministic", 1.0) as info:
        split = stratified_split(subjects, seed=0)
        sizes = tuple(len(split[k]) for k in ("train", "val", "test"))
        stratum = {s.subject_id: s.stratum for s in subjects}
        info.update(sizes="/".join(map(str, sizes)))
        assert sizes == (29, 6, 6)
        for k in ("val", "test"):
            assert sorted(stratum[i] for i in split[k]) == sorted({s.stratum for s in subjects})
        assert not (set(split["train"]) & set(split["val"]) or set(split["train"]) & set(split["test"])
                    or set(split["val"]) & set(split["test"]))
        assert set(split["train"]) | set(split["val"]) | set(split["test"]) == set(stratum)
        assert stratified_split(subjects, seed=0) == split


def _cli_session(root, monkeypatch):
    """Run every subcommand once from inside ``root`` using relative paths."""
    def run(*argv):
        assert cli_main([str(a) for a in argv]) == 0, argv

    root.mkdir()
    monkeypatch.chdir(root)
    d = Path(".")
    run("synth-model", "--seed", 5, "--dims", "162,6,5", "-o", d / "m.mfa")
    run("synth-scan", d / "m.mfa", "--seed", 6, "--points", 1500, "--hair", 600, "--landmarks", d / "l.csv",
        "--params", d / "gt.json", "-o", d / "raw.ply")
    run("scan-prep", d / "raw.ply", d / "l.csv", "--report", d / "crop.json", "-o", d / "crop.ply")
    run("fit", d / "m.mfa", d / "crop.ply", "--lmk", d / "l.csv", "--max-iters", 4, "-o", d / "fit.json")
    run("fit", d / "m.mfa", d / "crop.ply", d / "raw.ply", "--weights", "2,0,1e-4,1e-3,1e-4", "--max-iters", 2,
        "--jobs", 2, "-o", d / "fits")
    (d / "bundle.json").write_text(json.dumps({"lmk": 0.3, "pdl": 0.2, "l3d": 1.5, "emo": 0.7, "reg": 0.1}))
    run("loss-eval", "--bundle", d / "bundle.json", "--warmup", "-o", d / "loss.json")
    run("train-emotion", "--synthetic", "linear-va", "--seed", 3, "--epochs", 3, "--classes", 4,
        "--history", d / "emo.csv", "-o", d / "emo.mfh")
    run("train-encoder", "--synthetic", "--seed", 3, "--epochs", 2, "--history", d / "enc.csv", "-o", d / "enc.mfh")

    from morphfit.model import ModelAsset
    asset = ModelAsset.load(d / "m.mfa")
    rng = np.random.default_rng(7)
    gts, preds = [], []
    for i in range(10):
        p = random_params(asset, rng, scale=0.5)
        q = random_params(asset, rng, scale=0.5)
        va = rng.uniform(-1, 1, 4)
        gts.append({"id": f"s{i}", "params": params_to_dict(p), "valence": va[0], "arousal": va[1], "class": i % 3})
        preds.append({"id": f"s{i}", "params": params_to_dict(q), "valence": va[2], "arousal": va[3],
                      "class": int(rng.integers(3))})
    (d / "gt.json").write_text(json.dumps(gts))
    (d / "pred.json").write_text(json.dumps(preds))
    run("eval", "--pred", d / "pred.json", "--gt", d / "gt.json", "--classes", 3, "-o", d / "eval.json")
    run("geom-eval", "--model", d / "m.mfa", "--pred", d / "pred.json", "--gt", d / "gt.json", "--jobs", 2,
        "-o", d / "geom.json")

    with open(d / "roster.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "race", "gender"])
        for r in ("White", "Asian", "Black"):
            for g in "MF":
                w.writerows([f"{r}{g}{i}", r, g] for i in range(4))
    run("split", "--roster", d / "roster.csv", "--seed", 9, "-o", d / "split.json")
    with open(d / "affect.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "valence", "arousal", "class"])
        w.writerows([f"a{i}", 0.1, -0.1, i % 3] for i in range(30))
    run("kfold", "--labels", d / "affect.csv", "--k", 5, "--seed", 9, "--balanced", "-o", d / "folds.json")


def test_criterion_9_cli_reproducible(criterion, tmp_path, capsys, monkeypatch):
    subcommands = {"synth-model", "synth-scan", "scan-prep", "fit", "loss-eval", "train-emotion", "train-encoder",
                   "eval", "geom-eval", "split", "kfold"}
    with criterion(9, "every CLI subcommand bitwise reproducible under --seed") as info:
        outs = []
        for name in ("a", "b"):
            _cli_session(tmp_path / name, monkeypatch)
            outs.append(capsys.readouterr().out)
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        differ = [str(f) for f in files_a if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
        same_stdout = outs[0] == outs[1]
        info.update(subcommands=len(subcommands), files=len(files_a), differing=len(differ))
        assert not differ, differ
        assert same_stdout
