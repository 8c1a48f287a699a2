"""Accuracy bookkeeping shared by the attack suite and the analyser."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad


def w_robust_acc(a_nat: float, a_adv: float, gamma_nat: float = 0.5, gamma_adv: float = 0.5) -> float:
    """Weighted robust accuracy ``gamma_nat * a_nat + gamma_adv * a_adv``."""
    for name, v in (("a_nat", a_nat), ("a_adv", a_adv)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name}={v} outside [0, 1]")
    if gamma_nat < 0 or gamma_adv < 0:
        raise ValueError("gamma weights must be non-negative")
    return gamma_nat * a_nat + gamma_adv * a_adv


@dataclass
class EvalReport:
    a_nat: float
    a_adv: float
    a_w: float
    gamma_nat: float = 0.5
    gamma_adv: float = 0.5
    attack: dict | None = None
    n: int = 0
    note: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, a_nat, a_adv, n, attack=None, gamma_nat=0.5, gamma_adv=0.5, note="", **extra):
        return cls(float(a_nat), float(a_adv), w_robust_acc(a_nat, a_adv, gamma_nat, gamma_adv),
                   gamma_nat, gamma_adv, attack, int(n), note, dict(extra))

    def to_dict(self) -> dict:
        return asdict(self)


def logits_of(model, x, mode: str = "eval") -> ad.Tensor:
    """Logits of either an AW-Net (no BN stat updates) or a plain callable."""
    from .model import AWNetModel, forward

    x = ad.as_tensor(x)
    if isinstance(model, AWNetModel):
        return forward(x, model, mode, update_stats=False)[0]
    return model(x)


def predict(model, x: np.ndarray, batch_size: int = 256, mode: str = "eval") -> np.ndarray:
    """Arg-max class per sample; ties go to the lowest class index."""
    out = []
    with ad.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(np.argmax(logits_of(model, x[i:i + batch_size], mode).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    if len(y) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(predict(model, x, batch_size) == np.asarray(y)))
