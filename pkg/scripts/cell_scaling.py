"""Tabulate lambda_bar and |A_bar - I| against eta and fit log-log slopes.

    python scripts/cell_scaling.py [--d 3] [--radius 0.25] [--resolution 64] [--etas 0.15 0.2 0.3 0.4]
"""
import argparse

import numpy as np

from perflab.cell import compute_cell_data
from perflab.geometry import centered_ball
from perflab.lab import fit_loglog_slope


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--radius", type=float, default=0.25)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--etas", type=float, nargs="+", default=[0.15, 0.2, 0.3, 0.4])
    args = p.parse_args(argv)

    lam, dev = [], []
    print("eta,lambda_bar,A_dev,formula_gap")
    for eta in args.etas:
        cell = compute_cell_data(centered_ball(args.d, args.radius, eta=eta), args.resolution)
        A = cell.tensor.A_bar
        lam.append((eta, cell.pair.lambda_bar))
        dev.append((eta, float(np.linalg.norm(A - np.eye(args.d), 2))))
        print(f"{eta:g},{lam[-1][1]:.8g},{dev[-1][1]:.6g},{cell.tensor.gap:.3g}")
    if len(args.etas) >= 3:
        s1, r1 = fit_loglog_slope(lam)
        s2, r2 = fit_loglog_slope(dev)
        print(f"slope,lambda_bar,{s1:.4f},r2={r1:.4f}")
        print(f"slope,A_dev,{s2:.4f},r2={r2:.4f}")


if __name__ == "__main__":
    main()
