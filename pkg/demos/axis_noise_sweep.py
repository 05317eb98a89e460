"""Axis deviation of the estimator and of two axis-adjust elapses across noise levels.

    python3 demos/axis_noise_sweep.py [--points 10000] [--seed 3]

Prints a small table: variance, deviation before elapses, after one, after two.
"""
import argparse

import numpy as np

from thedra.geom_core import PointCloud
from thedra.pipeline import RunConfig, reconstruct
from thedra.tsurface_gen import add_noise, benchmark_spec, sample_tsurface_points


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=3, help="noise seed")
    ap.add_argument("--variances", default="1e-16,1e-3,1e-2,1e-1")
    args = ap.parse_args()
    X = sample_tsurface_points(benchmark_spec(), args.points, seed=1)
    print(f"{'variance':>10}  {'before':>8}  {'elapse 1':>8}  {'elapse 2':>8}")
    for var in map(float, args.variances.split(",")):
        cloud = add_noise(PointCloud(X), var, args.seed)
        r = reconstruct(cloud, RunConfig(elapses=2, truth_axis=np.array([0.0, 0, 1]), outer_tol=0.0))
        dev = list(r.deviations) + [float("nan")] * (3 - len(r.deviations))
        print(f"{var:>10.0e}  " + "  ".join(f"{d:8.3f}" for d in dev[:3]))


if __name__ == "__main__":
    main()
