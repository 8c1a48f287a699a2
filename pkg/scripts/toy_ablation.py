"""Run the four-row component ablation on the synthetic toy benchmark for a few seeds.

Each seed takes about ten minutes on one core.
"""

import argparse
from pathlib import Path

import numpy as np

from awnet.config import ExperimentConfig
from awnet.harness import ablate


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--out", default="runs/toy_ablation")
    args = parser.parse_args()

    scores: dict[str, list[float]] = {}
    for seed in args.seeds:
        cfg = ExperimentConfig.from_text("", {"attacks": "pgd_trades", "seed": str(seed),
                                              "out": str(Path(args.out) / f"seed{seed}")})
        for row, result in ablate(cfg).items():
            a_w = result.reports["pgd_trades"]["a_w"]
            scores.setdefault(row, []).append(a_w)
            print(f"seed {seed} {row:<14} A_w {a_w:.4f}")
    for row, vals in scores.items():
        print(f"median {row:<14} {np.median(vals):.4f}")


if __name__ == "__main__":
    main()
