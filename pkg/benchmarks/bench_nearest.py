"""Closest-point query throughput: compiled traversal vs numpy fallback.

    python3 benchmarks/bench_nearest.py [--verts 2562] [--points 20000] [--repeat 3]

Both backends run on the same BVH and queries; the script checks that they agree
before reporting timings.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from morphfit.kernels import available_backends
from morphfit.mesh import Bvh, Mesh
from morphfit.model import forward, random_params, synth_model


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--verts", type=int, default=2562)
    ap.add_argument("--points", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    asset = synth_model(args.seed, (args.verts, 10, 8))
    rng = np.random.default_rng(args.seed)
    verts = forward(asset, random_params(asset, rng))
    mesh = Mesh(verts, asset.faces)
    bvh = Bvh(mesh)
    surf, _, _ = mesh.sample_surface(args.points, rng)
    queries = surf + rng.normal(0.0, 2.0, surf.shape)

    backends = available_backends()
    results = {}
    for name, impl in backends.items():
        t, out = best_of(lambda: bvh.query(queries, backend=impl), args.repeat)
        results[name] = (t, out)
        print(f"{name:8s} {t * 1e3:9.1f} ms  {args.points / t:12.0f} queries/s")

    if "cython" in results and "python" in results:
        d_c = results["cython"][1][1]
        d_p = results["python"][1][1]
        err = float(np.max(np.abs(d_c - d_p)))
        print(f"max |distance difference| = {err:.3e}")
        print(f"speed-up cython/python     = {results['python'][0] / results['cython'][0]:.1f}x")
        if err > 1e-9:
            raise SystemExit("backends disagree")
    else:
        print("compiled backend not built; only the fallback was timed")


if __name__ == "__main__":
    main()
