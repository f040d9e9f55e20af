"""Compare Monte Carlo MSE against its state-evolution prediction, per iteration.

    python scripts/se_check.py --ensemble iid_gaussian --trials 10 --k 2000
"""
import argparse
import math

from ssmamp.bench import harness
from ssmamp.bench.config import ExperimentConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ensemble", default="iid_gaussian",
                    choices=["iid_gaussian", "row_orthogonal"])
    ap.add_argument("--alpha", type=float, default=0.5)
    ap.add_argument("--xi", type=float, default=100.0)
    ap.add_argument("--rho", type=float, default=0.1)
    ap.add_argument("--k", type=int, default=2000)
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--iters", type=int, default=10)
    args = ap.parse_args()

    path = "amp" if args.ensemble == "iid_gaussian" else "specialized"
    cfg = ExperimentConfig(ensemble=args.ensemble, alpha=args.alpha, xi=args.xi, rho=args.rho,
                           k=args.k, trials=args.trials, path=path, max_iters=args.iters,
                           tol=math.inf, record_tap=False, check_iters=[])
    report = harness.experiment(cfg, write=False)
    se, _ = harness.se_prediction(cfg, args.iters)
    print("t,mse_mean,mse_sem,mse_pred,rel_gap")
    for t in range(args.iters + 1):
        mean, sem, _ = report.aggregate[t]["mse"]
        pred = float(se.mse[t])
        print(f"{t},{mean:.6g},{sem:.3g},{pred:.6g},{abs(mean / pred - 1):.4f}")


if __name__ == "__main__":
    main()
