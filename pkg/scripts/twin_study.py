"""Train standard and PGD-AT twins on several seeds and report their filter statistics."""

import argparse

from awnet.experiments import TWIN_EPOCHS, twin_config, twin_study


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--epochs", type=int, default=TWIN_EPOCHS)
    args = parser.parse_args()

    for outcome in twin_study(twin_config(), range(args.seeds), args.epochs):
        print(f"seed {outcome.seed}: robust twin has smaller filter variance in "
              f"{len(outcome.smaller_layers)}/{len(outcome.comparison.layers)} layers")
        for layer in outcome.comparison.layers:
            print(f"  {layer.layer:<20} variance ratio {layer.variance_ratio:7.3f}  KS {layer.ks:.3f}")


if __name__ == "__main__":
    main()
