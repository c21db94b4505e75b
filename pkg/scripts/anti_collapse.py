"""Anti-collapse toy: train with and without the SIGReg term and report embedding spread.

    python3 scripts/anti_collapse.py [--lam 0 0.025] [--steps 500]
"""
import argparse
import dataclasses

from univit.experiment import ToyConfig, anti_collapse_toy


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lam", type=float, nargs="+", default=[0.0, 0.025])
    ap.add_argument("--steps", type=int, default=ToyConfig.steps)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = dataclasses.replace(ToyConfig(), steps=args.steps, seed=args.seed)
    for lam in args.lam:
        r = anti_collapse_toy(lam, cfg)
        print(f"lam={lam:<6g} variance {r.variance:.3e}  min std {r.per_dim_std.min():.3f}  "
              f"final loss {r.losses[-1]:.4f}")


if __name__ == "__main__":
    main()
