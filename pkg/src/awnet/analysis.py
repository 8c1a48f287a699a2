"""Filter-weight statistics, standard-vs-robust comparisons and evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import ks_2samp

from .attacks import AttackSpec, attack_dataset
from .autodiff import Tensor
from .metrics import EvalReport, predict


@dataclass
class FilterStats:
    layer: str
    means: np.ndarray
    variances: np.ndarray

    @property
    def mean_abs_mean(self) -> float:
        return float(np.mean(np.abs(self.means)))

    @property
    def mean_variance(self) -> float:
        return float(np.mean(self.variances))

    def __len__(self) -> int:
        return len(self.means)


def filter_stats(kernel, layer: str = "") -> FilterStats:
    """Per output filter: mean and population variance over its ``Cin*k*k`` weights."""
    w = kernel.data if isinstance(kernel, Tensor) else np.asarray(kernel, dtype=np.float64)
    if w.ndim != 4:
        raise ValueError(f"expected a (Cout, Cin, k, k) kernel, got shape {w.shape}")
    if w.size == 0:
        raise ValueError("empty kernel")
    flat = w.reshape(w.shape[0], -1)
    return FilterStats(layer, flat.mean(axis=1), flat.var(axis=1))


def model_filter_stats(model, layers: list[str] | None = None) -> list[FilterStats]:
    """Statistics of the classifier convolutions (the detector is not included)."""
    convs = model.conv_layers()
    if layers is not None:
        known = dict(convs)
        missing = [name for name in layers if name not in known]
        if missing:
            raise KeyError(f"unknown layers {missing}")
        convs = [(name, known[name]) for name in layers]
    return [filter_stats(conv.kernel, name) for name, conv in convs]


# ---------------------------------------------------------------------------
# comparison


@dataclass
class LayerComparison:
    layer: str
    bin_edges: np.ndarray
    counts_a: np.ndarray
    counts_b: np.ndarray
    ks: float
    variance_ratio: float

    def to_dict(self) -> dict:
        return {"layer": self.layer, "bin_edges": self.bin_edges.tolist(),
                "counts_a": self.counts_a.tolist(), "counts_b": self.counts_b.tolist(),
                "ks": self.ks, "variance_ratio": self.variance_ratio}


@dataclass
class DistributionComparison:
    layers: list[LayerComparison] = field(default_factory=list)

    def by_layer(self) -> dict[str, LayerComparison]:
        return {c.layer: c for c in self.layers}

    def fraction_ratio_above_one(self) -> float:
        return float(np.mean([c.variance_ratio > 1.0 for c in self.layers]))

    def to_dict(self) -> dict:
        return {"layers": [c.to_dict() for c in self.layers]}


def shared_bins(*samples: np.ndarray) -> np.ndarray:
    """Freedman-Diaconis edges on the pooled sample (one bin if it is degenerate)."""
    pooled = np.concatenate(samples)
    if np.ptp(pooled) == 0:
        v = float(pooled[0])
        return np.array([v - 0.5, v + 0.5])
    return np.histogram_bin_edges(pooled, bins="fd")


def compare_layer(sa: FilterStats, sb: FilterStats) -> LayerComparison:
    if len(sa) != len(sb):
        raise ValueError(f"layer {sa.layer!r}: {len(sa)} filters vs {len(sb)}")
    edges = shared_bins(sa.means, sb.means)
    ca, _ = np.histogram(sa.means, edges)
    cb, _ = np.histogram(sb.means, edges)
    ks = float(ks_2samp(sa.means, sb.means).statistic)
    vb = sb.mean_variance
    ratio = float(sa.mean_variance / vb) if vb > 0 else float("inf")
    return LayerComparison(sa.layer, edges, ca, cb, ks, ratio)


def _as_stats(source, layers) -> list[FilterStats]:
    if isinstance(source, (str, Path)):
        from .checkpoint import load_checkpoint

        source = load_checkpoint(source).model
    if isinstance(source, list):
        if layers is None:
            return source
        keep = {s.layer: s for s in source}
        return [keep[name] for name in layers]
    return model_filter_stats(source, layers)


def compare_distributions(model_a, model_b, layers: list[str] | None = None) -> DistributionComparison:
    """Histogram, KS statistic over filter means and variance ratio (a / b) per layer.

    ``model_a``/``model_b`` may be models, checkpoint directories or lists of
    :class:`FilterStats`. The ratio compares layer-level mean variances, so
    with ``a`` standard and ``b`` robust a ratio above one means the robust
    model's filters are tighter.
    """
    sa = _as_stats(model_a, layers)
    sb = _as_stats(model_b, layers)
    if [s.layer for s in sa] != [s.layer for s in sb]:
        raise ValueError("models expose different layers")
    for x, y in zip(sa, sb):
        if len(x) != len(y):
            raise ValueError(f"layer {x.layer!r} shape mismatch: {len(x)} vs {len(y)} filters")
    return DistributionComparison([compare_layer(x, y) for x, y in zip(sa, sb)])


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, x: np.ndarray, y: np.ndarray, attack: AttackSpec | None = None,
             rng: np.random.Generator | None = None, batch_size: int = 128) -> EvalReport:
    """Clean and attacked accuracy on the same samples, combined into A_w.

    Predictions take the arg-max logit; ties go to the lowest class index.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    a_nat = float(np.mean(predict(model, x) == y))
    if attack is None:
        return EvalReport.build(a_nat, a_nat, len(y), note="no attack")
    x_adv = attack_dataset(model, x, y, attack, rng, batch_size)
    a_adv = float(np.mean(predict(model, x_adv) == y))
    return EvalReport.build(a_nat, a_adv, len(y), attack=attack.to_dict())


# ---------------------------------------------------------------------------
# CSV


CSV_HEADER = ("layer", "index", "mean", "variance")


def write_filter_csv(path: str | Path, stats: list[FilterStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in stats:
            for i, (m, v) in enumerate(zip(s.means, s.variances)):
                w.writerow((s.layer, i, repr(float(m)), repr(float(v))))


def read_filter_csv(path: str | Path) -> list[FilterStats]:
    rows: dict[str, list[tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for layer, _, m, v in reader:
            rows.setdefault(layer, []).append((float(m), float(v)))
    return [FilterStats(k, np.array([r[0] for r in v]), np.array([r[1] for r in v]))
            for k, v in rows.items()]
