"""Desk-scale studies built from the library pieces.

* :func:`first_order_residuals` checks that the averaged adversarial loss
  ``0.5 * (L(x) + L(x + delta))`` at the FGSM vertex equals
  ``L(x) + (eps / 2) * ||grad_x L||_1`` up to a second-order remainder.
* :func:`twin_study` trains standard and PGD-AT copies of one network from a
  shared initialisation and compares their filter statistics.
* :func:`robust_toy_model` gives a small adversarially trained classifier for
  attack sanity checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .analysis import DistributionComparison, compare_distributions
from .config import DatasetSpec, ExperimentConfig
from .harness import load_dataset
from .metrics import logits_of
from .model import AWNetModel, static_config
from .training import TrainConfig, train_teachers, train_variant


def _per_sample_loss(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return ad.cross_entropy(logits_of(model, x), y, reduction="none").data


def input_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of each sample's own cross-entropy w.r.t. its input (eval mode)."""
    xt = ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    loss = ad.cross_entropy(logits_of(model, xt), y, reduction="none").sum()
    (g,) = ad.grad(loss, [xt])
    return g


def first_order_residuals(model, x: np.ndarray, y: np.ndarray, epsilons) -> np.ndarray:
    """Mean over samples of ``|L_adv - L - (eps/2) ||g||_1|`` for each epsilon.

    The perturbation is the unclipped FGSM vertex ``eps * sign(g)``, so the
    linear term is exact and the residual is the curvature remainder, which
    should scale as ``eps**2``.
    """
    base = _per_sample_loss(model, x, y)
    g = input_gradient(model, x, y)
    l1 = np.abs(g).reshape(len(x), -1).sum(axis=1)
    out = []
    for eps in epsilons:
        moved = _per_sample_loss(model, x + eps * np.sign(g), y)
        l_adv = 0.5 * (base + moved)
        out.append(float(np.mean(np.abs(l_adv - base - 0.5 * eps * l1))))
    return np.array(out)


@dataclass
class TwinOutcome:
    seed: int
    comparison: DistributionComparison
    smaller_layers: list[str] = field(default_factory=list)

    @property
    def majority_smaller(self) -> bool:
        return len(self.smaller_layers) * 2 > len(self.comparison.layers)

    def ks_in_smaller(self) -> dict[str, float]:
        by = self.comparison.by_layer()
        return {name: by[name].ks for name in self.smaller_layers}


# The default synthetic set is fitted within a few epochs, after which the
# standard twin's weights barely move. Heavier pixel noise forces the standard
# twin to memorise, which is the regime where the two training schemes part.
TWIN_NOISE = 0.3
TWIN_EPOCHS = 20


def twin_config(**kw) -> ExperimentConfig:
    return ExperimentConfig(dataset=DatasetSpec(noise=TWIN_NOISE), **kw)


def twin_pair(config: ExperimentConfig, seed: int, epochs: int):
    """Standard and PGD-AT static twins from one initialisation and one schedule."""
    train, _ = load_dataset(config.dataset, seed)
    return train_teachers(config.model, train, config.train, epochs, seed)


def twin_study(config: ExperimentConfig, seeds, epochs: int) -> list[TwinOutcome]:
    """For each seed, the layers where the adversarial twin's filters vary less."""
    outcomes = []
    for seed in seeds:
        pair = twin_pair(config, seed, epochs)
        cmp = compare_distributions(pair.t_nat, pair.t_adv)
        smaller = [c.layer for c in cmp.layers if c.variance_ratio > 1.0]
        outcomes.append(TwinOutcome(seed, cmp, smaller))
    return outcomes


def robust_toy_model(config: ExperimentConfig, seed: int = 0, epochs: int = 12,
                     mode: str = "pgd_at") -> tuple[AWNetModel, object]:
    """A static toy classifier trained with ``mode``; returns it with its holdout set."""
    train, hold = load_dataset(config.dataset, seed)
    model = AWNetModel(static_config(config.model), seed)
    tc = TrainConfig(**{**config.train.__dict__, "epochs": epochs, "lr_milestones": ()})
    train_variant(model, train, tc, seed, mode)
    return model, hold


__all__ = ["first_order_residuals", "input_gradient", "twin_study", "twin_pair", "twin_config",
           "TwinOutcome", "robust_toy_model", "TWIN_NOISE", "TWIN_EPOCHS"]
