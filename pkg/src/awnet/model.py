"""AW-Net: residual classifier with detector-driven filter modulation and MixBN.

The dynamic weight sub-network is a small ResNet whose block convolutions are
rescaled filter-wise by per-sample regulation vectors. Every normalisation
layer is a MixBN pair (clean / adversarial) routed by the ground-truth sample
type during training and blended by the detector's clean probability at test
time.

Downsampling between stages is a 2x2 average pool; strided convolutions are
avoided because every convolution must have an exact output size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import BatchNorm2d, FilterBank, Linear, Module

MODES = ("train_clean", "train_adv", "train", "eval")
CLEAN, ADV = 1, 0  # type labels y'; the softmax column for "clean" is index 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 10
    widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    feature_dim: int = 128
    extractor_widths: tuple[int, int, int] = (16, 32, 64)
    beta: float = 4.0
    dynamic_weight: bool = True
    mixbn: bool = True
    type_blend: bool = True
    detector: bool = True
    signal_init_scale: float = 0.01

    def __post_init__(self):
        if self.dynamic_weight and not self.detector:
            raise ConfigError("dynamic weights need a detector")
        if self.mixbn and self.type_blend and not self.detector:
            raise ConfigError("MixBN blending by type prediction needs a detector")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if len(self.extractor_widths) != 3:
            raise ConfigError("extractor has three hidden conv layers plus the feature layer")

    def descriptor(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["extractor_widths"] = list(self.extractor_widths)
        return d

    @classmethod
    def from_descriptor(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["extractor_widths"] = tuple(d["extractor_widths"])
        return cls(**d)


PRESETS = {
    "toy": ModelConfig(widths=(8, 16), blocks_per_stage=1, beta=1.0),
    "desk": ModelConfig(),
    "full": ModelConfig(widths=(64, 128, 256, 512), blocks_per_stage=2, feature_dim=512,
                        extractor_widths=(64, 128, 256)),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


def static_config(cfg: ModelConfig) -> ModelConfig:
    """The plain residual network AW-Net is built on: no detector, single BN."""
    return replace(cfg, dynamic_weight=False, mixbn=False, type_blend=False, detector=False)


# ---------------------------------------------------------------------------
# normalisation


class SingleBN(Module):
    def __init__(self, channels: int):
        self.bn = BatchNorm2d(channels)


class MixBN(Module):
    def __init__(self, channels: int):
        self.bn_adv = BatchNorm2d(channels)
        self.bn_nat = BatchNorm2d(channels)


def _make_norm(channels: int, cfg: ModelConfig) -> Module:
    return MixBN(channels) if cfg.mixbn else SingleBN(channels)


def mixbn_apply(pi: Tensor, mixbn: Module, mode: str, p_type=None,
                update_stats: bool = True) -> Tensor:
    """Route features through a MixBN pair.

    ``train_clean`` / ``train_adv`` use only the matching branch with batch
    statistics. ``eval`` returns ``(1 - p) * BN_adv(pi) + p * BN_nat(pi)`` with
    both branches on running statistics, ``p`` being the per-sample clean
    probability. A :class:`SingleBN` ignores routing.
    """
    if mode not in ("train_clean", "train_adv", "eval"):
        raise ValueError(f"unknown MixBN mode {mode!r}")
    if isinstance(mixbn, SingleBN):
        return mixbn.bn(pi, train=mode != "eval", update_stats=update_stats)
    if mode == "eval":
        if p_type is None:
            raise ValueError("eval-mode MixBN needs p_type")
        p = p_type if isinstance(p_type, Tensor) else Tensor(np.broadcast_to(
            np.asarray(p_type, dtype=np.float64), (pi.shape[0],)))
        p = p.reshape(pi.shape[0], 1, 1, 1)
        adv = mixbn.bn_adv(pi, train=False)
        nat = mixbn.bn_nat(pi, train=False)
        return (1.0 - p) * adv + p * nat
    if p_type is not None:
        raise ValueError(f"{mode} routing is decided by the sample type; p_type must be None")
    branch = mixbn.bn_nat if mode == "train_clean" else mixbn.bn_adv
    return branch(pi, train=True, update_stats=update_stats)


# ---------------------------------------------------------------------------
# blocks


class AWNetBlock(Module):
    def __init__(self, cin: int, cout: int, cfg: ModelConfig, rng: np.random.Generator):
        self.conv1 = FilterBank(cin, cout, 3, rng)
        self.norm1 = _make_norm(cout, cfg)
        self.conv2 = FilterBank(cout, cout, 3, rng)
        self.norm2 = _make_norm(cout, cfg)
        if cin != cout:
            self.shortcut = FilterBank(cin, cout, 1, rng)
            self.norm_sc = _make_norm(cout, cfg)
        else:
            self.shortcut = None
            self.norm_sc = None


def modulate(filters: FilterBank, omega) -> FilterBank:
    """Copy of ``filters`` whose m-th filter is scaled by ``omega[m]`` (bias untouched)."""
    omega = np.asarray(omega.data if isinstance(omega, Tensor) else omega, dtype=np.float64)
    if omega.shape != (filters.out_channels,):
        raise ValueError(f"omega has shape {omega.shape}, filter bank has {filters.out_channels} filters")
    out = FilterBank.__new__(FilterBank)
    out.kernel = Tensor(filters.kernel.data * omega[:, None, None, None])
    out.bias = Tensor(filters.bias.data.copy())
    out.stride, out.padding = filters.stride, filters.padding
    return out


def block_forward(psi: Tensor, block: AWNetBlock, omega_pair, mode: str, p_type=None,
                  update_stats: bool = True) -> Tensor:
    """relu(F2(relu(F1(psi))) + shortcut(psi)) with F = MixBN(modulated conv)."""
    w1, w2 = omega_pair if omega_pair is not None else (None, None)
    h = block.conv1(psi, w1)
    h = ad.relu(mixbn_apply(h, block.norm1, mode, p_type, update_stats))
    h = block.conv2(h, w2)
    h = mixbn_apply(h, block.norm2, mode, p_type, update_stats)
    if block.shortcut is None:
        sc = psi
    else:
        sc = mixbn_apply(block.shortcut(psi), block.norm_sc, mode, p_type, update_stats)
    if sc.shape != h.shape:
        raise ad.ShapeError(f"residual shapes differ: {sc.shape} vs {h.shape}")
    return ad.relu(h + sc)


# ---------------------------------------------------------------------------
# detector


@dataclass
class RegulationSignals:
    omega: list[tuple[Tensor, Tensor]]
    p_type: Tensor
    type_logits: Tensor
    beta: float
    features: Tensor | None = field(default=None, repr=False)


class Detector(Module):
    """Frozen conv feature extractor plus trainable type and signal heads."""

    def __init__(self, cfg: ModelConfig, layer_channels: list[int], rng: np.random.Generator):
        w1, w2, w3 = cfg.extractor_widths
        chans = [cfg.in_channels, w1, w2, w3, cfg.feature_dim]
        self.extractor = [FilterBank(chans[i], chans[i + 1], 3, rng) for i in range(4)]
        self.extractor_norms = [BatchNorm2d(chans[i + 1]) for i in range(4)]
        self.feature_norm = BatchNorm2d(cfg.feature_dim)
        self.type_head = Linear(cfg.feature_dim, 2, rng, bias=False)
        self.signal_heads = [
            Linear(cfg.feature_dim, c, rng, bias=False, scale=cfg.signal_init_scale)
            for c in layer_channels
        ]
        self.frozen_extractor = False
        self.freeze_extractor(True)

    def freeze_extractor(self, frozen: bool = True) -> None:
        self.frozen_extractor = frozen
        for conv, norm in zip(self.extractor, self.extractor_norms):
            for p in (conv.kernel, conv.bias, norm.gamma, norm.beta):
                p.requires_grad = not frozen
        self.feature_norm.gamma.requires_grad = False
        self.feature_norm.beta.requires_grad = False

    def features(self, x: Tensor) -> Tensor:
        """Pooled backbone features; batch statistics only while unfrozen."""
        h = x
        train = not self.frozen_extractor
        for i, (conv, norm) in enumerate(zip(self.extractor, self.extractor_norms)):
            h = ad.relu(norm(conv(h), train=train, update_stats=train))
            if i < 2:
                h = ad.avg_pool2d(h, 2)
        pooled = ad.global_avg_pool(h)
        n, d = pooled.shape
        # standardise the pooled features with statistics fixed at pretraining time
        return self.feature_norm(pooled.reshape(n, d, 1, 1), train=train, update_stats=train).reshape(n, d)


def detect(x: Tensor, detector: Detector, beta: float, n_blocks: int | None = None) -> RegulationSignals:
    """Type probability and per-layer regulation vectors for a batch."""
    if n_blocks is not None and len(detector.signal_heads) != 2 * n_blocks:
        raise ConfigError(
            f"{len(detector.signal_heads)} signal heads for {n_blocks} blocks (need two per block)"
        )
    psi = detector.features(x)
    type_logits = detector.type_head(psi)
    probs = ad.softmax(type_logits, axis=1)
    p_type = (probs * np.array([0.0, 1.0])).sum(axis=1)
    omegas = [(ad.tanh(head(psi)) + 1.0) ** beta for head in detector.signal_heads]
    pairs = [(omegas[i], omegas[i + 1]) for i in range(0, len(omegas), 2)]
    return RegulationSignals(pairs, p_type, type_logits, beta, psi)


# ---------------------------------------------------------------------------
# full model


class AWNetModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        w0 = cfg.widths[0]
        self.stem = FilterBank(cfg.in_channels, w0, 3, rng)
        self.stem_norm = _make_norm(w0, cfg)
        self.blocks: list[AWNetBlock] = []
        self.pool_before: list[bool] = []
        cin = w0
        for s, w in enumerate(cfg.widths):
            for b in range(cfg.blocks_per_stage):
                self.blocks.append(AWNetBlock(cin, w, cfg, rng))
                self.pool_before.append(s > 0 and b == 0)
                cin = w
        self.classifier = Linear(cin, cfg.num_classes, rng)
        if cfg.detector:
            chans = [c for blk in self.blocks for c in (blk.conv1.out_channels, blk.conv2.out_channels)]
            self.detector = Detector(cfg, chans, rng)
        else:
            self.detector = None

    @property
    def is_dynamic(self) -> bool:
        return self.detector is not None

    def conv_layers(self) -> list[tuple[str, FilterBank]]:
        """Named classifier convolutions in forward order (detector excluded)."""
        out = [("stem", self.stem)]
        for i, blk in enumerate(self.blocks):
            out += [(f"blocks.{i}.conv1", blk.conv1), (f"blocks.{i}.conv2", blk.conv2)]
            if blk.shortcut is not None:
                out.append((f"blocks.{i}.shortcut", blk.shortcut))
        return out

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        """Trainable parameters: main network, signal heads (regulator), type head."""
        groups: dict[str, list[tuple[str, Tensor]]] = {"main": [], "regulator": [], "type": []}
        for name, p in self.named_parameters():
            if not p.requires_grad:
                continue
            if name.startswith("detector.extractor"):  # also matches extractor_norms
                continue
            if name.startswith("detector.type_head"):
                groups["type"].append((name, p))
            else:
                groups["regulator" if name.startswith("detector.") else "main"].append((name, p))
        return groups

    def __call__(self, x, mode: str = "eval", **kw) -> Tensor:
        return forward(x, self, mode, **kw)[0]


def _route_train(x: Tensor, model: AWNetModel, type_labels, update_stats: bool):
    labels = np.asarray(type_labels).reshape(-1)
    if labels.shape[0] != x.shape[0]:
        raise ValueError("type_labels must have one entry per sample")
    if np.all(labels == CLEAN):
        return forward(x, model, "train_clean", update_stats=update_stats)
    if np.all(labels == ADV):
        return forward(x, model, "train_adv", update_stats=update_stats)
    clean_idx = np.flatnonzero(labels == CLEAN)
    adv_idx = np.flatnonzero(labels == ADV)
    lc, sc = forward(ad.take(x, clean_idx), model, "train_clean", update_stats=update_stats)
    la, sa = forward(ad.take(x, adv_idx), model, "train_adv", update_stats=update_stats)
    order = np.argsort(np.concatenate([clean_idx, adv_idx]), kind="stable")
    logits = ad.take(ad.concat([lc, la]), order)
    if sc is None:
        return logits, None
    omega = [tuple(ad.take(ad.concat([a, b]), order) for a, b in zip(pc, pa))
             for pc, pa in zip(sc.omega, sa.omega)]
    signals = RegulationSignals(
        omega,
        ad.take(ad.concat([sc.p_type, sa.p_type]), order),
        ad.take(ad.concat([sc.type_logits, sa.type_logits]), order),
        sc.beta,
    )
    return logits, signals


def forward(x, model: AWNetModel, mode: str = "eval", type_labels=None,
            update_stats: bool = True, p_type=None):
    """Run detector then classifier. Returns ``(logits, signals)``.

    ``mode="train"`` routes each sample by ``type_labels`` (1 clean, 0
    adversarial). ``p_type`` overrides the detected clean probability in eval
    mode.
    """
    x = ad.as_tensor(x)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "train":
        if type_labels is None:
            raise ValueError("train mode needs ground-truth type_labels for MixBN routing")
        return _route_train(x, model, type_labels, update_stats)
    cfg = model.config
    signals = detect(x, model.detector, cfg.beta, len(model.blocks)) if model.detector else None

    blend = None
    if mode == "eval" and cfg.mixbn:
        if p_type is not None:
            blend = p_type
        elif cfg.type_blend:
            blend = signals.p_type
        else:
            blend = 0.0  # adversarial BN only

    h = model.stem(x)
    h = ad.relu(mixbn_apply(h, model.stem_norm, mode, blend, update_stats))
    for j, blk in enumerate(model.blocks):
        if model.pool_before[j]:
            h = ad.avg_pool2d(h, 2)
        pair = signals.omega[j] if (signals is not None and cfg.dynamic_weight) else None
        h = block_forward(h, blk, pair, mode, blend, update_stats)
    logits = model.classifier(ad.global_avg_pool(h))
    return logits, signals


def static_twin(model: AWNetModel, branch: str = "bn_nat") -> AWNetModel:
    """Static network carrying ``model``'s classifier weights and one BN branch."""
    twin = AWNetModel(static_config(model.config))
    src = model.state_dict()
    state = {}
    for name in twin.state_dict():
        if ".bn." in name:
            key = name.replace(".bn.", f".{branch}.") if model.config.mixbn else name
        else:
            key = name
        state[name] = src[key]
    twin.load_state_dict(state)
    return twin


def tie_mixbn(model: AWNetModel, source: str = "bn_nat") -> None:
    """Copy one MixBN branch (params and stats) onto the other, in place."""
    other = "bn_adv" if source == "bn_nat" else "bn_nat"
    state = model.state_dict()
    for name, arr in state.items():
        if f".{other}." in name:
            arr[...] = state[name.replace(f".{other}.", f".{source}.")]


def build(cfg: ModelConfig, seed: int = 0) -> AWNetModel:
    return AWNetModel(cfg, seed)
