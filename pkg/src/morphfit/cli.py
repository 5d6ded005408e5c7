"""``morphfit`` command line entry point.

Exit status: 0 on success, 1 on IO or schema errors, 2 on usage errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

log = logging.getLogger("morphfit")


class CliError(Exception):
    pass


def _dims(text):
    try:
        vals = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if len(vals) != 3 or min(vals) <= 0:
        raise argparse.ArgumentTypeError("expected V,D_beta,D_psi with positive entries")
    return vals


def _floats(text):
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _default_jobs():
    env = os.environ.get("MORPHFIT_THREADS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def _table(rows, header=("name", "value")) -> str:
    rows = [(str(a), b if isinstance(b, str) else ("n/a" if b is None else f"{b:.6g}")) for a, b in rows]
    w = max([len(header[0])] + [len(r[0]) for r in rows])
    out = [f"{header[0].ljust(w)}  {header[1]}", f"{'-' * w}  {'-' * 12}"]
    out += [f"{a.ljust(w)}  {b}" for a, b in rows]
    return "\n".join(out)


def _map(fn, items, jobs):
    """Apply ``fn`` to each item, concurrently if ``jobs > 1``; results keep input order."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_model(args):
    from .model import synth_model

    asset = synth_model(args.seed, args.dims)
    asset.save(args.output)
    print(_table([("vertices", str(asset.n_verts)), ("faces", str(len(asset.faces))),
                  ("n_beta", str(asset.dims[1])), ("n_expr", str(asset.dims[2]))]))


def cmd_synth_scan(args):
    from .dataset import write_params
    from .mesh import write_ply
    from .model import ModelAsset, random_params
    from .scanprep import synth_head_scan, write_landmarks_csv

    asset = ModelAsset.load(args.model)
    rng = np.random.default_rng(args.seed)
    params = random_params(asset, rng, scale=args.scale, pose_scale=args.pose_scale)
    scan = synth_head_scan(asset, params, rng, n_face=args.points, n_hair=args.hair)
    write_ply(scan.points, args.output)
    if args.landmarks:
        write_landmarks_csv(scan.landmarks83, args.landmarks)
    if args.params:
        write_params(params, args.params)
    print(_table([("points", str(len(scan.points))), ("landmarks", str(len(scan.landmarks83)))]))


def cmd_scan_prep(args):
    from .mesh import read_ply, write_ply
    from .scanprep import prepare_scan

    scan = read_ply(args.scan, args.landmarks)
    if scan.landmarks83 is None or len(scan.landmarks83) != 83:
        raise CliError("landmark file must hold 83 rows of x,y,z")
    cropped, plane = prepare_scan(scan, enclose=not args.raw_radii)
    write_ply(cropped.points, args.output)
    report = {"input_points": len(scan.points), "kept_points": len(cropped.points),
              "origin": plane.origin, "u": plane.u, "v": plane.v, "radii": plane.radii}
    if args.report:
        _write_json(report, args.report)
    if len(cropped.points) == 0:
        print("warning: crop removed every point", file=sys.stderr)
    print(_table([("input_points", str(len(scan.points))), ("kept_points", str(len(cropped.points))),
                  ("r_a", plane.radii[0]), ("r_b", plane.radii[1])]))


def cmd_fit(args):
    from .dataset import params_to_dict, write_params
    from .fitter import FitConfig, FitWeights, fit
    from .mesh import read_ply
    from .model import ModelAsset

    asset = ModelAsset.load(args.model)
    weights = FitWeights.parse(args.weights)
    config = FitConfig(max_outer_iters=args.max_iters)
    lmks = args.lmk or []
    if lmks and len(lmks) != len(args.scans):
        raise CliError(f"{len(lmks)} landmark files for {len(args.scans)} scans")
    scans = [read_ply(s, lmks[i] if lmks else None) for i, s in enumerate(args.scans)]
    if not lmks:
        weights = FitWeights(weights.w_scan, 0.0, weights.w_shape, weights.w_pose, weights.w_expr)

    results = _map(lambda sc: fit(asset, sc, weights, config), scans, args.jobs)

    out = Path(args.output)
    rows = []
    if len(scans) == 1:
        params, trace = results[0]
        write_params(params, out)
        trace_path = Path(args.trace) if args.trace else out.with_suffix(".trace.csv")
        trace_path.write_text(trace.to_csv())
        targets = [(args.scans[0], trace)]
    else:
        out.mkdir(parents=True, exist_ok=True)
        summary = []
        targets = []
        for src, (params, trace) in zip(args.scans, results):
            stem = Path(src).stem
            write_params(params, out / f"{stem}.json")
            (out / f"{stem}.trace.csv").write_text(trace.to_csv())
            summary.append({"scan": str(src), "params": params_to_dict(params), "status": trace.status,
                            "energy": trace.energies()[-1]})
            targets.append((src, trace))
        _write_json(summary, out / "summary.json")
    for src, trace in targets:
        rows.append((Path(src).name, f"{trace.energies()[-1]:.6g} ({trace.status}, {len(trace.entries) - 1} iters)"))
    print(_table(rows, ("scan", "final energy")))


def cmd_loss_eval(args):
    from .losses import LossWeights, TermBundle, encoder_loss

    weights = LossWeights.load(args.config) if args.config else LossWeights()
    raw = json.loads(Path(args.bundle).read_text())
    if not isinstance(raw, dict):
        raise CliError("bundle must be a JSON object of term name -> number or null")
    known = {"photo", "perc", "lmk", "pdl", "region", "l3d", "emo", "reg"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise CliError(f"unknown term(s) in bundle: {', '.join(unknown)}")
    bundle = TermBundle(raw)
    lam3 = weights.lambda_3d_warmup if args.warmup else None
    total, breakdown = encoder_loss(bundle, weights, lambda_3d=lam3)
    res = {"total": total, "breakdown": breakdown, "absent": bundle.absent(sorted(known))}
    if args.output:
        _write_json(res, args.output)
    print(_table([("total", total)] + [(k, v) for k, v in breakdown.items()]))


def _train_config(args, **extra):
    from .trainer import TrainConfig

    return TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed, **extra)


def cmd_train_emotion(args):
    from .dataset import read_records
    from .suites import linear_va, separable_clusters
    from .trainer import head_features, history_csv, train_emotion_head

    if args.synthetic:
        make = separable_clusters if args.synthetic == "separable" else linear_va
        x, va, labels = make(args.seed)
    else:
        recs = read_records(args.data)
        missing = [r["id"] for r in recs if not {"params", "valence", "arousal", "class"} <= set(r)]
        if missing:
            raise CliError(f"records lack params/valence/arousal/class: {missing[:5]}")
        x = np.stack([head_features(r["params"]) for r in recs])
        va = np.array([[r["valence"], r["arousal"]] for r in recs])
        labels = np.array([r["class"] for r in recs])
    head, history = train_emotion_head(x, va, labels, _train_config(args, class_weights=args.class_weights),
                                       n_classes=args.classes)
    head.save(args.output)
    if args.history:
        Path(args.history).write_text(history_csv(history))
    best = min(history, key=lambda r: r["val_loss"]) if history else {}
    print(_table([(k, v) for k, v in best.items() if k != "epoch"] + [("best_epoch", str(best.get("epoch", 0)))]))


def _read_encoder_samples(path):
    from .dataset import SchemaError, params_from_dict
    from .trainer import EncoderSample

    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise SchemaError("", "expected an array of samples")
    out = []
    for i, d in enumerate(data):
        if not isinstance(d, dict) or "landmarks2d" not in d:
            raise SchemaError(f"/{i}/landmarks2d", "missing field 'landmarks2d'")
        if "base" not in d:
            raise SchemaError(f"/{i}/base", "missing field 'base'")
        lmk = np.asarray(d["landmarks2d"], dtype=float)
        psi = np.asarray(d["psi_gt"], dtype=float) if d.get("psi_gt") is not None else None
        aff = (float(d["valence"]), float(d["arousal"]), int(d["class"])) if "class" in d else None
        out.append(EncoderSample(lmk, params_from_dict(d["base"], f"/{i}/base"), psi, aff))
    return out


def cmd_train_encoder(args):
    from . import container
    from .losses import LossWeights
    from .model import ModelAsset
    from .suites import planted_encoder_suite
    from .trainer import HEAD_MAGIC, history_csv, psi_mse, train_toy_encoder

    weights = LossWeights.load(args.config) if args.config else LossWeights()
    if args.synthetic:
        suite = planted_encoder_suite(args.seed)
        asset, samples, held_out, n_classes = suite.asset, suite.train, suite.test, suite.n_classes
        val = suite.val
    else:
        if not args.model:
            raise CliError("--model is required with --data")
        asset = ModelAsset.load(args.model)
        samples, held_out, n_classes = _read_encoder_samples(args.data), None, args.classes
        val = None
    run = train_toy_encoder(asset, samples, weights, _train_config(args), n_classes=n_classes,
                            val_samples=val)
    meta = {"kind": "toy_encoder", "n_landmarks": run.encoder.n_landmarks, "n_expr": run.encoder.n_expr,
            "encoder_hidden": list(run.encoder.hidden), "head_in": run.head.in_dim,
            "n_classes": run.head.n_classes, "head_hidden": list(run.head.hidden)}
    container.write(args.output, HEAD_MAGIC, {**run.encoder.arrays("enc."), **run.head.arrays("head.")}, meta)
    if args.history:
        Path(args.history).write_text(history_csv(run.history))
    last = run.history[-1] if run.history else {}
    rows = [(k, v) for k, v in last.items() if k != "epoch"]
    if held_out:
        rows.append(("held_out_psi_mse", psi_mse(run.encoder, asset, held_out)))
    print(_table(rows))


def _pairs(pred_path, gt_path):
    from .dataset import read_records

    pred = {r["id"]: r for r in read_records(pred_path)}
    gt = read_records(gt_path)
    missing = [r["id"] for r in gt if r["id"] not in pred]
    if missing:
        raise CliError(f"predictions missing for ids: {missing[:5]}")
    return [(pred[r["id"]], r) for r in gt]


def cmd_eval(args):
    from .metrics import MetricReport, affect_report, param_mse

    pairs = _pairs(args.pred, args.gt)
    if not pairs:
        raise CliError("no ground-truth records")
    rep = MetricReport()
    if all("valence" in p and "valence" in g for p, g in pairs):
        va_p = [[p["valence"], p["arousal"]] for p, _ in pairs]
        va_g = [[g["valence"], g["arousal"]] for _, g in pairs]
        has_cls = all("class" in p and "class" in g for p, g in pairs)
        rep = affect_report(va_p, va_g, [p["class"] for p, _ in pairs] if has_cls else None,
                            [g["class"] for _, g in pairs] if has_cls else None, args.classes)
    if all("params" in p and "params" in g for p, g in pairs):
        for group in ("expr_jaw", "beta"):
            rep.scalars[f"param_mse_{group}"] = param_mse([p["params"] for p, _ in pairs],
                                                          [g["params"] for _, g in pairs], group)
    if args.output:
        Path(args.output).write_text(rep.to_json() + "\n")
    print(rep.to_table(), end="")


def cmd_geom_eval(args):
    from .metrics import ced_auc, geometry_errors
    from .model import ModelAsset, forward

    asset = ModelAsset.load(args.model)
    pairs = _pairs(args.pred, args.gt)
    if not pairs or not all("params" in p and "params" in g for p, g in pairs):
        raise CliError("every record needs params")
    meshes = _map(lambda pg: (forward(asset, pg[0]["params"]), forward(asset, pg[1]["params"])), pairs, args.jobs)
    ge = geometry_errors([m[0] for m in meshes], [m[1] for m in meshes], asset)
    res = {"keypoint_error_mean": ge.keypoint_mean, "keypoint_error_std": ge.keypoint_std,
           "vertex_error_mean": ge.vertex_mean, "vertex_error_std": ge.vertex_std,
           "auc": {repr(t): ced_auc(ge.keypoint_per_sample, t) for t in args.tau},
           "per_sample": [{"id": g["id"], "keypoint_error": k, "vertex_error": v}
                          for (_, g), k, v in zip(pairs, ge.keypoint_per_sample, ge.vertex_per_sample)]}
    if args.output:
        _write_json(res, args.output)
    rows = [(k, res[k]) for k in ("keypoint_error_mean", "keypoint_error_std", "vertex_error_mean",
                                  "vertex_error_std")]
    rows += [(f"auc@{t}", v) for t, v in res["auc"].items()]
    print(_table(rows, ("metric", "value")))


def cmd_split(args):
    from .dataset import read_roster, stratified_split

    fixed = json.loads(Path(args.fixed_assignment).read_text()) if args.fixed_assignment else None
    split = stratified_split(read_roster(args.roster), seed=args.seed, fixed=fixed)
    _write_json(split, args.output)
    print(_table([(k, str(len(v))) for k, v in split.items()], ("split", "subjects")))


def cmd_kfold(args):
    from .dataset import read_affect_csv
    from .metrics import kfold_split

    recs = read_affect_csv(args.labels)
    labels = [r.label for r in recs]
    folds = kfold_split(labels, k=args.k, seed=args.seed, class_balanced_val=args.balanced)
    ids = [r.sample_id for r in recs]
    out = [{"fold": i, "train": [ids[j] for j in tr], "val": [ids[j] for j in va]} for i, (tr, va) in enumerate(folds)]
    _write_json(out, args.output)
    print(_table([(f"fold {f['fold']}", f"{len(f['train'])} train / {len(f['val'])} val") for f in out],
                 ("fold", "sizes")))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morphfit", description="Blendshape face model fitting and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-model", help="write a synthetic model asset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dims", type=_dims, default=(642, 10, 8), help="V,D_beta,D_psi")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth_model)

    s = sub.add_parser("synth-scan", help="sample a synthetic head scan with hair from a model asset")
    s.add_argument("model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--points", type=_positive_int, default=4000)
    s.add_argument("--hair", type=int, default=3000)
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--pose-scale", type=float, default=0.1)
    s.add_argument("--landmarks", help="write the 83 landmarks to this CSV")
    s.add_argument("--params", help="write the generating parameters to this JSON")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth_scan)

    s = sub.add_parser("scan-prep", help="crop a scan to the landmark ellipse")
    s.add_argument("scan")
    s.add_argument("landmarks")
    s.add_argument("--raw-radii", action="store_true", help="use per-axis landmark extents as radii")
    s.add_argument("--report", help="write plane and radii as JSON")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_scan_prep)

    s = sub.add_parser("fit", help="fit model parameters to one or more scans")
    s.add_argument("model")
    s.add_argument("scans", nargs="+")
    s.add_argument("--lmk", action="append", help="landmark CSV (repeat once per scan)")
    s.add_argument("--weights", default="2.0,0.1,1e-4,1e-3,1e-4", help="scan,lmk,shape,pose,expr")
    s.add_argument("--max-iters", type=int, default=30)
    s.add_argument("--trace", help="trace CSV path (single scan)")
    s.add_argument("--jobs", type=_positive_int, default=_default_jobs())
    s.add_argument("-o", "--output", required=True, help="params JSON, or a directory for several scans")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("loss-eval", help="evaluate the encoder objective for a bundle of terms")
    s.add_argument("--config", help="loss weight JSON")
    s.add_argument("--bundle", required=True, help="JSON of term values (null = absent)")
    s.add_argument("--warmup", action="store_true", help="use the warmup 3D weight")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_loss_eval)

    def training_flags(s):
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--epochs", type=int, default=50)
        s.add_argument("--lr", type=float, default=2e-3)
        s.add_argument("--batch-size", type=_positive_int, default=64)
        s.add_argument("--classes", type=_positive_int, default=7)
        s.add_argument("--history", help="per-epoch CSV")
        s.add_argument("-o", "--output", required=True)

    s = sub.add_parser("train-emotion", help="train the affect head")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--data", help="records JSON with params, valence, arousal, class")
    g.add_argument("--synthetic", choices=("separable", "linear-va"))
    s.add_argument("--class-weights", action="store_true", help="inverse-frequency class weights")
    training_flags(s)
    s.set_defaults(func=cmd_train_emotion)

    s = sub.add_parser("train-encoder", help="train the toy landmark encoder")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--data", help="encoder samples JSON")
    g.add_argument("--synthetic", action="store_true", help="use the planted synthetic suite")
    s.add_argument("--model", help="model asset (with --data)")
    s.add_argument("--config", help="loss weight JSON")
    training_flags(s)
    s.set_defaults(func=cmd_train_encoder, epochs=30)

    s = sub.add_parser("eval", help="affect and parameter metrics")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--classes", type=_positive_int, default=7)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("geom-eval", help="keypoint and vertex errors with CED AUC")
    s.add_argument("--model", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--tau", type=_floats, default=[1.0, 2.0, 5.0], help="comma-separated thresholds (mm)")
    s.add_argument("--jobs", type=_positive_int, default=_default_jobs())
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_geom_eval)

    s = sub.add_parser("split", help="subject-exclusive stratified split")
    s.add_argument("--roster", required=True, help="CSV with id,race,gender[,frames]")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fixed-assignment", help="JSON with explicit val/test subject lists")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("kfold", help="stratified k-fold split of labelled samples")
    s.add_argument("--labels", required=True, help="affect CSV (id,valence,arousal,class)")
    s.add_argument("--k", type=_positive_int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--balanced", action="store_true", help="class-balanced validation folds")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_kfold)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"morphfit {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
