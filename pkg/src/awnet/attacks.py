"""L-infinity white-box attacks and transfer evaluation.

All attacks return points inside ``[max(x - eps, 0), min(x + eps, 1)]`` and
never touch model parameters or BN statistics. ``sign(0) = 0``: a coordinate
with zero gradient is not moved.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .losses import trades_kl, type_loss
from .metrics import EvalReport, logits_of, predict
from .model import ADV, AWNetModel, forward

FAMILIES = ("fgsm", "pgd_sat", "pgd_trades", "cw_linf", "adaptive")
FEASIBILITY_TOL = 1e-12


class InfeasibleIterate(AssertionError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    family: str = "pgd_sat"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    iters: int = 20
    random_start: float = 0.0
    kappa: float = 0.0
    adaptive_weight: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.epsilon < 0 or self.step_size < 0:
            raise ValueError("epsilon and step_size must be non-negative")
        if self.iters < 1:
            raise ValueError("iters must be at least 1")
        if self.random_start < 0:
            raise ValueError("random_start must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def standard_spec(family: str, epsilon: float = 8 / 255) -> AttackSpec:
    """Evaluation settings: PGD-20 at 2/255, CW 30 steps, FGSM one step of eps."""
    if family == "fgsm":
        return AttackSpec("fgsm", epsilon, epsilon, 1, 0.0)
    if family == "pgd_sat":
        return AttackSpec("pgd_sat", epsilon, 2 / 255, 20, epsilon)
    if family == "pgd_trades":
        return AttackSpec("pgd_trades", epsilon, 2 / 255, 20, 0.001)
    if family == "cw_linf":
        return AttackSpec("cw_linf", epsilon, 2 / 255, 30, epsilon)
    if family == "adaptive":
        return AttackSpec("adaptive", epsilon, 2 / 255, 20, 0.001)
    raise ValueError(f"unknown attack family {family!r}")


def training_spec(epsilon: float = 8 / 255) -> AttackSpec:
    """PGD-10, step 2/255, uniform random start of 0.001."""
    return AttackSpec("pgd_sat", epsilon, 2 / 255, 10, 0.001)


@dataclass
class AdversarialBatch:
    x_nat: np.ndarray
    x_adv: np.ndarray
    y: np.ndarray
    success: np.ndarray

    def linf(self) -> np.ndarray:
        return np.abs(self.x_adv - self.x_nat).reshape(len(self.y), -1).max(axis=1)


def check_feasible(x_adv: np.ndarray, x_nat: np.ndarray, eps: float) -> None:
    if np.any(np.abs(x_adv - x_nat) > eps + FEASIBILITY_TOL):
        raise InfeasibleIterate("iterate left the epsilon ball")
    if np.any(x_adv < 0.0) or np.any(x_adv > 1.0):
        raise InfeasibleIterate("iterate left the image domain [0, 1]")


def _finish(model, x, x_adv, y, mode) -> AdversarialBatch:
    pred = predict(model, x_adv, mode=mode)
    return AdversarialBatch(x, x_adv, np.asarray(y), pred != np.asarray(y))


def _ascend(objective, x: np.ndarray, spec: AttackSpec, rng: np.random.Generator | None) -> np.ndarray:
    lo = np.maximum(x - spec.epsilon, 0.0)
    hi = np.minimum(x + spec.epsilon, 1.0)
    if spec.random_start > 0:
        rng = np.random.default_rng() if rng is None else rng
        x_adv = np.clip(x + rng.uniform(-spec.random_start, spec.random_start, size=x.shape), lo, hi)
    else:
        x_adv = x.copy()
    check_feasible(x_adv, x, spec.epsilon)
    if spec.step_size == 0:
        if spec.iters > 1:
            warnings.warn("step_size is 0; returning the projected starting point", stacklevel=3)
        return x_adv
    for _ in range(spec.iters):
        xt = ad.Tensor(x_adv, requires_grad=True)
        (g,) = ad.grad(objective(xt), [xt])
        x_adv = np.clip(x_adv + spec.step_size * np.sign(g), lo, hi)
        check_feasible(x_adv, x, spec.epsilon)
    return x_adv


def _ce_objective(model, y, mode):
    return lambda xt: ad.cross_entropy(logits_of(model, xt, mode), y, reduction="none").sum()


def _kl_objective(model, x, mode):
    with ad.no_grad():
        clean = logits_of(model, x, mode)
    return lambda xt: ad.kl_div(clean, logits_of(model, xt, mode), reduction="none").sum()


def fgsm(model, x, y, spec: AttackSpec, mode: str = "eval") -> AdversarialBatch:
    """``clip(x + eps * sign(grad_x CE))``."""
    x = np.asarray(x, dtype=np.float64)
    xt = ad.Tensor(x, requires_grad=True)
    (g,) = ad.grad(_ce_objective(model, y, mode)(xt), [xt])
    x_adv = np.clip(x + spec.epsilon * np.sign(g), 0.0, 1.0)
    check_feasible(x_adv, x, spec.epsilon)
    return _finish(model, x, x_adv, y, mode)


def pgd(model, x, y, spec: AttackSpec, loss_kind: str = "ce", rng=None,
        mode: str = "eval") -> AdversarialBatch:
    """Projected sign-gradient ascent on CE or on KL(p(x) || p(x_adv))."""
    x = np.asarray(x, dtype=np.float64)
    if loss_kind == "ce":
        objective = _ce_objective(model, y, mode)
    elif loss_kind == "kl_vs_clean":
        objective = _kl_objective(model, x, mode)
    else:
        raise ValueError(f"unknown loss_kind {loss_kind!r}")
    return _finish(model, x, _ascend(objective, x, spec, rng), y, mode)


def cw_margin(logits: ad.Tensor, y, kappa: float = 0.0) -> ad.Tensor:
    """Per-sample attacker margin ``min(max_{i != y} Z_i - Z_y, kappa)``.

    This is the negated CW objective ``max(Z_y - max_{i != y} Z_i, -kappa)``:
    ascent stops paying off once the sample is misclassified with confidence
    ``kappa``. Correctly classified samples always see a non-zero gradient.
    """
    if logits.shape[1] < 2:
        raise ValueError("CW margin needs at least two classes")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(y)), np.asarray(y)] = 1.0
    true = (logits * onehot).sum(axis=1)
    other = ad.max_(logits - 1e9 * onehot, axis=1)
    margin = other - true
    if np.isinf(kappa):
        return margin
    return margin - ad.relu(margin - kappa)


def cw_linf(model, x, y, spec: AttackSpec, rng=None, mode: str = "eval") -> AdversarialBatch:
    """Margin-loss PGD under the L-infinity budget."""
    x = np.asarray(x, dtype=np.float64)
    with ad.no_grad():
        if logits_of(model, x[:1], mode).shape[1] < 2:
            raise ValueError("CW attack needs a model with at least two classes")

    def objective(xt):
        return cw_margin(logits_of(model, xt, mode), y, spec.kappa).sum()

    return _finish(model, x, _ascend(objective, x, spec, rng), y, mode)


def adaptive_attack(model, x, y, spec: AttackSpec, rng=None) -> AdversarialBatch:
    """PGD-trades objective plus ``weight * L_type(P_type, adversarial)``.

    Ascending the type loss of the true (adversarial) label pushes the
    detector toward calling the example clean.
    """
    if not isinstance(model, AWNetModel) or model.detector is None:
        raise TypeError("adaptive attack needs an AW-Net model with a detector")
    x = np.asarray(x, dtype=np.float64)
    with ad.no_grad():
        clean = forward(x, model, "eval", update_stats=False)[0]
    lam = spec.adaptive_weight

    def objective(xt):
        logits, signals = forward(xt, model, "eval", update_stats=False)
        obj = ad.kl_div(clean, logits, reduction="none").sum()
        if lam != 0:
            obj = obj + lam * len(y) * type_loss(signals.p_type, np.full(len(y), ADV))
        return obj

    return _finish(model, x, _ascend(objective, x, spec, rng), y, "eval")


def run_attack(model, x, y, spec: AttackSpec, rng=None, mode: str = "eval") -> AdversarialBatch:
    if spec.family == "fgsm":
        return fgsm(model, x, y, spec, mode)
    if spec.family == "pgd_sat":
        return pgd(model, x, y, spec, "ce", rng, mode)
    if spec.family == "pgd_trades":
        return pgd(model, x, y, spec, "kl_vs_clean", rng, mode)
    if spec.family == "cw_linf":
        return cw_linf(model, x, y, spec, rng, mode)
    return adaptive_attack(model, x, y, spec, rng)


def attack_dataset(model, x, y, spec: AttackSpec, rng=None, batch_size: int = 128) -> np.ndarray:
    """Adversarial copy of a whole array, attacked batch by batch."""
    parts = [run_attack(model, x[i:i + batch_size], y[i:i + batch_size], spec, rng).x_adv
             for i in range(0, len(x), batch_size)]
    return np.concatenate(parts)


def _input_shape(model, x) -> None:
    with ad.no_grad():
        logits_of(model, x[:1])


def transfer_eval(surrogate, target, x, y, spec: AttackSpec, rng=None,
                  batch_size: int = 128) -> EvalReport:
    """Craft examples white-box on ``surrogate`` and score them on ``target``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty dataset")
    try:
        _input_shape(surrogate, x)
        _input_shape(target, x)
    except (ad.ShapeError, ValueError) as exc:
        raise ad.ShapeError(f"surrogate and target disagree on input shape {x.shape[1:]}: {exc}") from exc
    x_adv = attack_dataset(surrogate, x, y, spec, rng, batch_size)
    a_nat = float(np.mean(predict(target, x) == y))
    a_adv = float(np.mean(predict(target, x_adv) == y))
    return EvalReport.build(a_nat, a_adv, len(y), attack=spec.to_dict(), note="transfer")


def with_epsilon(spec: AttackSpec, epsilon: float) -> AttackSpec:
    return replace(spec, epsilon=epsilon)
