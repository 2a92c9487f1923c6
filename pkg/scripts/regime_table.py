"""Predicted selection per regime next to the numerically optimal value and stationary masses."""

import argparse

import numpy as np

from eqselect import bench, dynamics, hjb


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--problem", default="double_well_1", choices=bench.PROBLEM_NAMES)
    ap.add_argument("--eps", type=float, nargs="+", default=[0.2, 0.1, 0.05])
    ap.add_argument("--nus", type=float, nargs="+", default=[0.5, 1.0, 2.0])
    ap.add_argument("--c", type=float, help="penalty weight for double_well_1")
    args = ap.parse_args(argv)
    params = {"c": args.c} if args.c is not None and args.problem == "double_well_1" else {}
    sys = bench.get_problem(args.problem, **params).system
    eqs = dynamics.find_equilibria(sys)
    pts = [float(e.z[0]) for e in eqs]
    print("equilibria:", ", ".join(f"{e.z[0]:+.3f} ({e.classification}, l={e.penalty_at:.3g}, "
                                   f"L+={e.unstable_trace:.3g})" for e in eqs))
    for nu in args.nus:
        rep = dynamics.regime_report(eqs, nu)
        pred = [round(float(e.z[0]), 6) + 0.0 for e in rep.predicted_S]
        print(f"\nnu={nu:g}  {rep.regime}  predicted {pred}  beta limit {rep.beta_limit:.4g}")
        print(f"  {'eps':>6s} {'beta':>10s} {'effort':>10s}  masses")
        for e in args.eps:
            sol = hjb.solve_ergodic_hjb(sys, e, nu)
            dens = hjb.closed_loop_density(sol, sys, pts)
            mass = "  ".join(f"{p:+g}:{m:.3f}" for p, m in dens.mass_near.items())
            print(f"  {e:6.3f} {sol.beta:10.5f} {hjb.control_effort(sol, dens):10.3e}  {mass}")


if __name__ == "__main__":
    np.set_printoptions(precision=4)
    main()
