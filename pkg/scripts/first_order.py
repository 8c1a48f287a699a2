"""Check how the averaged FGSM loss departs from its first-order expansion as eps shrinks."""

import argparse

import numpy as np

from awnet.config import ExperimentConfig
from awnet.experiments import first_order_residuals, robust_toy_model


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--epochs", type=int, default=12)
    parser.add_argument("--samples", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    model, hold = robust_toy_model(ExperimentConfig(), seed=args.seed, epochs=args.epochs)
    eps = [1e-3, 5e-4, 2.5e-4]
    res = first_order_residuals(model, hold.images[: args.samples], hold.labels[: args.samples], eps)
    for e, r in zip(eps, res):
        print(f"eps {e:.2e}  residual {r:.3e}")
    print("halving ratios:", np.round(res[:-1] / res[1:], 3))


if __name__ == "__main__":
    main()
