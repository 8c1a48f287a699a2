"""Joint adversarial-distillation training and baseline training loops."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attacks import AttackSpec, pgd, training_spec
from .data import DatasetHandle
from .layers import Linear
from .losses import KD_DIRECTIONS, kd_loss, total_loss, trades_kl, type_loss
from .model import ADV, CLEAN, AWNetModel, forward, static_config

MODES = ("mtard_joint", "trades", "standard", "pgd_at")
ALPHA_MIN, ALPHA_MAX = 0.1, 0.9

__all__ = [
    "TrainConfig", "TrainState", "TeacherPair", "TrainingError", "kd_loss", "total_loss",
    "auto_balance", "sgd_step", "train_epoch", "train_variant", "train_variant_epoch",
    "variant_loss", "pretrain_extractor", "train_teachers",
]


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int, batch: int, seed: int | None):
        super().__init__(f"{message} (epoch {epoch}, batch {batch}, seed {seed})")
        self.epoch, self.batch, self.seed = epoch, batch, seed


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr_main: float = 0.1
    lr_regulator: float = 0.01
    lr_type: float | None = None  # type head; None means lr_regulator
    momentum: float = 0.9
    weight_decay: float = 2e-4
    lr_milestones: tuple[int, ...] = (20, 26)
    lr_decay: float = 0.1
    tau: float = 1.0
    kd_direction: str = "teacher_student"
    alpha1: float = 0.5
    alpha2: float = 0.5
    auto_balance: bool = True
    mode: str = "mtard_joint"
    trades_weight: float = 6.0
    attack_routing: str = "train_adv"
    train_attack: AttackSpec = field(default_factory=training_spec)

    def __post_init__(self):
        if self.lr_main < 0 or self.lr_regulator < 0 or (self.lr_type or 0) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if any(b <= a for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise ValueError("lr_milestones must be strictly increasing")
        if self.kd_direction not in KD_DIRECTIONS:
            raise ValueError(f"kd_direction must be one of {KD_DIRECTIONS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.attack_routing not in ("train_adv", "eval"):
            raise ValueError("attack_routing is 'train_adv' or 'eval'")
        if abs(self.alpha1 + self.alpha2 - 1.0) > 1e-12:
            raise ValueError("alpha1 + alpha2 must equal 1")

    def lr_factor(self, epoch: int) -> float:
        return self.lr_decay ** sum(epoch >= m for m in self.lr_milestones)


@dataclass
class TrainState:
    epoch: int = 0
    alpha1: float = 0.5
    alpha2: float = 0.5
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    l_adv_hist: list[float] = field(default_factory=list)
    l_nat_hist: list[float] = field(default_factory=list)

    @classmethod
    def start(cls, config: TrainConfig) -> "TrainState":
        return cls(alpha1=config.alpha1, alpha2=config.alpha2)


@dataclass
class TeacherPair:
    t_nat: AWNetModel
    t_adv: AWNetModel

    def frozen(self) -> "TeacherPair":
        self.t_nat.set_requires_grad(False)
        self.t_adv.set_requires_grad(False)
        return self


# ---------------------------------------------------------------------------
# optimiser pieces


def sgd_step(params, grads, state: dict[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float):
    """Heavy-ball SGD with L2 decay folded into the velocity.

    ``v <- momentum * v + grad + weight_decay * p``; ``p <- p - lr * v``.
    ``params`` is a list of ``(name, Tensor)``; ``grads`` maps names to arrays
    (a missing name counts as a zero gradient). Updates in place.
    """
    for name, p in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        step = g + weight_decay * p.data
        v = state.get(name)
        v = step if v is None else momentum * v + step
        state[name] = v
        p.data -= lr * v
    return params


def auto_balance(alpha1: float, alpha2: float, l_adv_hist, l_nat_hist, rate: float = 1.0):
    """Shift weight toward the distillation term whose loss has fallen less.

    Each weight is multiplied by ``(last / first) ** rate`` of its own loss
    history, the pair is renormalised and ``alpha1`` is clamped to
    [0.1, 0.9] with ``alpha2 = 1 - alpha1``.
    """
    if len(l_adv_hist) == 0 or len(l_nat_hist) == 0:
        return alpha1, alpha2

    def progress(hist):
        first, last = float(hist[0]), float(hist[-1])
        return last / first if first > 0 else 1.0

    w1 = alpha1 * progress(l_adv_hist) ** rate
    w2 = alpha2 * progress(l_nat_hist) ** rate
    if w1 + w2 <= 0:
        return alpha1, alpha2
    a1 = float(np.clip(w1 / (w1 + w2), ALPHA_MIN, ALPHA_MAX))
    return a1, 1.0 - a1


def _grads(group):
    return {name: p.grad for name, p in group if p.grad is not None}


def _step_groups(model: AWNetModel, config: TrainConfig, state: TrainState) -> None:
    factor = config.lr_factor(state.epoch)
    lr_type = config.lr_regulator if config.lr_type is None else config.lr_type
    lrs = {"main": config.lr_main * factor, "regulator": config.lr_regulator * factor,
           "type": lr_type * factor}
    for gname, group in model.param_groups().items():
        sgd_step(group, _grads(group), state.velocity, lrs[gname], config.momentum, config.weight_decay)


def _adv_examples(model, x, y, config: TrainConfig, rng, loss_kind="ce") -> np.ndarray:
    return pgd(model, x, y, config.train_attack, loss_kind, rng, mode=config.attack_routing).x_adv


def _check_finite(loss: ad.Tensor, epoch: int, batch: int, seed) -> None:
    if not np.isfinite(loss.data).all():
        raise TrainingError("non-finite loss", epoch, batch, seed)


# ---------------------------------------------------------------------------
# joint training


def joint_loss(model: AWNetModel, x_nat, x_adv, t_nat_logits, t_adv_logits, tau: float,
               alpha1: float, alpha2: float, direction: str = "teacher_student"):
    """Total loss of one batch plus its components (as floats)."""
    s_nat, sig_nat = forward(x_nat, model, "train_clean")
    s_adv, sig_adv = forward(x_adv, model, "train_adv")
    l_nat = kd_loss(s_nat, t_nat_logits, tau, direction)
    l_adv = kd_loss(s_adv, t_adv_logits, tau, direction)
    parts = {"l_nat": float(l_nat.data), "l_adv": float(l_adv.data)}
    if sig_nat is not None:
        p = ad.concat([sig_nat.p_type, sig_adv.p_type])
        labels = np.concatenate([np.full(len(x_nat), CLEAN), np.full(len(x_adv), ADV)])
        loss = total_loss(p, labels, l_adv, l_nat, alpha1, alpha2)
        parts["l_type"] = float(type_loss(p.detach(), labels).data)
    else:
        loss = alpha1 * l_adv + alpha2 * l_nat
    return loss, parts


def train_epoch(model: AWNetModel, data: DatasetHandle, teachers: TeacherPair, config: TrainConfig,
                rng: np.random.Generator, state: TrainState | None = None, seed: int | None = None) -> dict:
    """One epoch of two-teacher adversarial distillation.

    Per batch: craft PGD examples on the current student, distil the clean
    branch from ``t_nat`` on clean inputs and the adversarial branch from
    ``t_adv`` on adversarial inputs, add the detector's type loss, and take one
    SGD step per parameter group.
    """
    state = TrainState.start(config) if state is None else state
    sums = {"loss": 0.0, "l_nat": 0.0, "l_adv": 0.0, "l_type": 0.0}
    n_seen = 0
    for b, (xb, yb) in enumerate(data.batches(config.batch_size, rng)):
        model.zero_grad()
        try:
            x_adv = _adv_examples(model, xb, yb, config, rng)
            with ad.no_grad():
                t_nat = teachers.t_nat(xb).data
                t_adv = teachers.t_adv(x_adv).data
            loss, parts = joint_loss(model, xb, x_adv, t_nat, t_adv, config.tau,
                                     state.alpha1, state.alpha2, config.kd_direction)
        except ad.NonFiniteError as exc:
            raise TrainingError(str(exc), state.epoch, b, seed) from exc
        _check_finite(loss, state.epoch, b, seed)
        ad.backward(loss)
        _step_groups(model, config, state)
        sums["loss"] += float(loss.data) * len(yb)
        for k, v in parts.items():
            sums[k] += v * len(yb)
        n_seen += len(yb)
    metrics = {k: v / max(n_seen, 1) for k, v in sums.items()}
    state.l_adv_hist.append(metrics["l_adv"])
    state.l_nat_hist.append(metrics["l_nat"])
    if config.auto_balance:
        state.alpha1, state.alpha2 = auto_balance(config.alpha1, config.alpha2,
                                                  state.l_adv_hist, state.l_nat_hist)
    metrics.update(alpha1=state.alpha1, alpha2=state.alpha2,
                   lr_main=config.lr_main * config.lr_factor(state.epoch))
    state.epoch += 1
    return metrics


# ---------------------------------------------------------------------------
# single-model variants


def variant_loss(model: AWNetModel, x, y, x_adv, mode: str, trades_weight: float = 6.0):
    """Standard CE, averaged PGD-AT CE, or TRADES CE + weighted KL.

    For an AW-Net the detector's type loss on both inputs is added.
    """
    if mode == "standard":
        logits, sig = forward(x, model, "train_clean")
        loss = ad.cross_entropy(logits, y)
        sig_adv = None
    elif mode == "pgd_at":
        logits, sig = forward(x, model, "train_clean")
        adv_logits, sig_adv = forward(x_adv, model, "train_adv")
        loss = 0.5 * (ad.cross_entropy(logits, y) + ad.cross_entropy(adv_logits, y))
    elif mode == "trades":
        logits, sig = forward(x, model, "train_clean")
        adv_logits, sig_adv = forward(x_adv, model, "train_adv")
        loss = ad.cross_entropy(logits, y) + trades_weight * trades_kl(logits, adv_logits)
    else:
        raise ValueError(f"unknown variant {mode!r}")
    if sig is not None:
        if sig_adv is None:
            loss = loss + type_loss(sig.p_type, np.full(len(y), CLEAN))
        else:
            p = ad.concat([sig.p_type, sig_adv.p_type])
            loss = loss + type_loss(p, np.concatenate([np.full(len(y), CLEAN), np.full(len(y), ADV)]))
    return loss


def train_variant_epoch(model: AWNetModel, data: DatasetHandle, config: TrainConfig,
                        rng: np.random.Generator, state: TrainState | None = None,
                        mode: str | None = None, seed: int | None = None) -> dict:
    mode = mode or config.mode
    state = TrainState.start(config) if state is None else state
    total, n_seen = 0.0, 0
    for b, (xb, yb) in enumerate(data.batches(config.batch_size, rng)):
        model.zero_grad()
        try:
            if mode == "pgd_at":
                x_adv = _adv_examples(model, xb, yb, config, rng, "ce")
            elif mode == "trades":
                x_adv = _adv_examples(model, xb, yb, config, rng, "kl_vs_clean")
            else:
                x_adv = None
            loss = variant_loss(model, xb, yb, x_adv, mode, config.trades_weight)
        except ad.NonFiniteError as exc:
            raise TrainingError(str(exc), state.epoch, b, seed) from exc
        _check_finite(loss, state.epoch, b, seed)
        ad.backward(loss)
        _step_groups(model, config, state)
        total += float(loss.data) * len(yb)
        n_seen += len(yb)
    metrics = {"loss": total / max(n_seen, 1), "lr_main": config.lr_main * config.lr_factor(state.epoch)}
    state.epoch += 1
    return metrics


def train_variant(model: AWNetModel, data: DatasetHandle, config: TrainConfig,
                  rng: np.random.Generator | int = 0, mode: str | None = None) -> AWNetModel:
    """Train ``model`` in place for ``config.epochs`` epochs with a single-model loss."""
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    state = TrainState.start(config)
    for _ in range(config.epochs):
        train_variant_epoch(model, data, config, rng, state, mode)
    return model


# ---------------------------------------------------------------------------
# auxiliaries


def pretrain_extractor(model: AWNetModel, data: DatasetHandle, epochs: int = 10, lr: float = 0.05,
                       batch_size: int = 64, seed: int = 0) -> float:
    """Standard training of the detector backbone through a throwaway linear probe.

    Leaves the extractor frozen. Returns the probe's final training accuracy.
    """
    det = model.detector
    if det is None:
        raise ValueError("model has no detector")
    rng = np.random.default_rng(seed)
    probe = Linear(model.config.feature_dim, model.config.num_classes, rng)
    det.freeze_extractor(False)
    params = [(n, t) for n, t in det.named_parameters() if n.startswith("extractor")]
    params += [("probe.weight", probe.weight), ("probe.bias", probe.bias)]
    velocity: dict[str, np.ndarray] = {}
    correct = 0
    try:
        for epoch in range(epochs):
            correct = 0
            for xb, yb in data.batches(batch_size, rng):
                for _, p in params:
                    p.grad = None
                logits = probe(det.features(ad.Tensor(xb)))
                ad.backward(ad.cross_entropy(logits, yb))
                correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
                sgd_step(params, {n: p.grad for n, p in params if p.grad is not None},
                         velocity, lr, 0.9, 5e-4)
    finally:
        det.freeze_extractor(True)
        for _, p in params:
            p.grad = None
    return correct / max(len(data), 1)


def scale_milestones(config: TrainConfig, epochs: int) -> tuple[int, ...]:
    """The config's milestones stretched to a run of ``epochs`` epochs."""
    if config.epochs <= 0:
        return config.lr_milestones
    scaled = {max(1, round(m * epochs / config.epochs)) for m in config.lr_milestones}
    return tuple(sorted(scaled))


def train_teachers(model_cfg, data: DatasetHandle, config: TrainConfig, epochs: int,
                   seed: int = 0) -> TeacherPair:
    """Standard- and PGD-AT-trained static twins from one initialisation."""
    cfg = static_config(model_cfg)
    t_nat = AWNetModel(cfg, seed)
    t_adv = AWNetModel(cfg, seed)
    tcfg = TrainConfig(**{**config.__dict__, "epochs": epochs,
                          "lr_milestones": scale_milestones(config, epochs)})
    train_variant(t_nat, data, tcfg, np.random.default_rng(seed + 11), "standard")
    train_variant(t_adv, data, tcfg, np.random.default_rng(seed + 13), "pgd_at")
    return TeacherPair(t_nat, t_adv).frozen()
