"""Train all three stages at a given config, probe each checkpoint and check the staged criteria.

    python3 scripts/run_staged.py --out runs/staged [--config scripts/configs/desk.yaml]
"""
import argparse
import json
import logging
from pathlib import Path

from univit.config import load_config
from univit.experiment import STAGE_ORDER, run_staged, staged_criteria


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--config", default=None, help="YAML run config (defaults to the desk config)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    cfg = load_config(args.config)
    summary = run_staged(cfg, args.out)
    crit = staged_criteria(summary)
    (Path(args.out) / "criteria.json").write_text(json.dumps(crit, indent=2, sort_keys=True) + "\n")

    print(f"{'stage':8s} {'2d/2d':>7s} {'3d/3d':>7s} {'all/2d':>7s} {'all/3d':>7s} {'2d/3d':>7s} {'3d/2d':>7s}")
    for name in STAGE_ORDER:
        g = summary["stages"][name]["grid"]
        cells = [g[f][ev]["macro"] for f, ev in
                 (("2d", "2d"), ("3d", "3d"), ("all", "2d"), ("all", "3d"), ("2d", "3d"), ("3d", "2d"))]
        print(f"{name:8s} " + " ".join(f"{c:7.3f}" for c in cells))
    for key, block in crit.items():
        print(f"{key}: {'PASS' if block['passed'] else 'FAIL'}")


if __name__ == "__main__":
    main()
