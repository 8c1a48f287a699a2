"""Experiment orchestration: training runs, ablation grids and plot exports.

A run directory contains::

    config.txt              the flat config the run was started with
    metrics.jsonl           one JSON object per epoch (sorted keys, no timings)
    checkpoints/best/       checkpoint with the highest A_w seen so far
    reports.json            final EvalReport per configured attack
    filters/<model>.csv     per-filter statistics of the student and teachers
    summary.json            best epoch, best A_w, detector accuracy, config hash
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .analysis import (
    compare_distributions,
    evaluate,
    model_filter_stats,
    read_filter_csv,
    shared_bins,
    write_filter_csv,
)
from .attacks import AttackSpec, pgd, standard_spec, training_spec
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DatasetSpec, ExperimentConfig
from .data import DatasetHandle, load_cifar_binary, synthetic_splits
from .model import AWNetModel, forward, static_config
from .training import (
    TeacherPair,
    TrainingError,
    TrainState,
    pretrain_extractor,
    train_epoch,
    train_teachers,
    train_variant_epoch,
)


class RunFailure(RuntimeError):
    """A run aborted; carries the serialized config and seed needed to replay it."""

    def __init__(self, message: str, config_text: str, seed: int):
        super().__init__(f"{message} (seed {seed})")
        self.config_text = config_text
        self.seed = seed


@dataclass
class RunResult:
    out: Path
    best_epoch: int | None
    best_a_w: float | None
    reports: dict
    summary: dict
    model: AWNetModel


def load_dataset(spec: DatasetSpec, seed: int) -> tuple[DatasetHandle, DatasetHandle]:
    if spec.source == "synthetic":
        return synthetic_splits(spec.classes, spec.n_train, spec.n_holdout, spec.image_size, seed,
                                noise=spec.noise)
    train = load_cifar_binary(spec.path, "train").shuffled(seed).subset(slice(0, spec.n_train))
    hold = load_cifar_binary(spec.path, "test").subset(slice(0, spec.n_holdout))
    return train, hold


def selection_spec(config: ExperimentConfig) -> AttackSpec:
    """Model-selection attack: PGD-trades at the training epsilon."""
    return standard_spec("pgd_trades", config.train.train_attack.epsilon)


def detector_accuracy(model: AWNetModel, x: np.ndarray, y: np.ndarray, spec: AttackSpec | None = None,
                      rng=None) -> dict:
    """Balanced accuracy of the type head on clean inputs vs PGD examples crafted in eval mode."""
    if model.detector is None:
        raise ValueError("model has no detector")
    spec = spec or training_spec()
    x_adv = pgd(model, x, y, spec, "ce", rng).x_adv
    with ad.no_grad():
        p_clean = forward(x, model, "eval", update_stats=False)[1].p_type.data
        p_adv = forward(x_adv, model, "eval", update_stats=False)[1].p_type.data
    tpr = float(np.mean(p_clean >= 0.5))
    tnr = float(np.mean(p_adv < 0.5))
    return {"clean_recall": tpr, "adv_recall": tnr, "balanced": 0.5 * (tpr + tnr)}


def prepare(config: ExperimentConfig, train: DatasetHandle, teachers: TeacherPair | None = None,
            extractor_state: dict | None = None) -> tuple[AWNetModel, TeacherPair | None]:
    """Fresh student (extractor pretrained or restored, then frozen) and teachers if needed."""
    model = AWNetModel(config.model, config.seed)
    if model.detector is not None:
        if extractor_state is not None:
            det_state = model.detector.state_dict()
            det_state.update(extractor_state)
            model.detector.load_state_dict(det_state)
        else:
            pretrain_extractor(model, train, config.extractor_epochs, seed=config.seed)
    if config.train.mode == "mtard_joint" and teachers is None:
        teachers = train_teachers(config.model, train, config.train, config.teacher_epochs, config.seed)
    return model, teachers


def extractor_state_of(model: AWNetModel) -> dict:
    return {k: v.copy() for k, v in model.detector.state_dict().items()
            if k.startswith("extractor") or k.startswith("feature_norm")}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def run(config: ExperimentConfig, teachers: TeacherPair | None = None,
        extractor_state: dict | None = None) -> RunResult:
    """Train per ``config.train.mode``, keep the best-A_w checkpoint, write all artifacts."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.txt")
    text, seed = config.to_text(), config.seed
    try:
        return _run(config, out, teachers, extractor_state)
    except (TrainingError, ad.NonFiniteError) as exc:
        _write_json(out / "failure.json", {"error": str(exc), "seed": seed, "config": text})
        raise RunFailure(str(exc), text, seed) from exc


def _run(config, out, teachers, extractor_state) -> RunResult:
    train, hold = load_dataset(config.dataset, config.seed)
    model, teachers = prepare(config, train, teachers, extractor_state)
    tc = config.train
    sel = selection_spec(config)
    state = TrainState.start(tc)
    rng = np.random.default_rng(config.seed)
    best_epoch, best_a_w = None, None
    ckpt = out / "checkpoints" / "best"
    log_lines = []
    chash = config.hash()

    select = hold.subset(slice(0, config.select_size or len(hold)))

    def evaluate_epoch(epoch):
        return evaluate(model, select.images, select.labels, sel, np.random.default_rng([config.seed, epoch]))

    if tc.epochs == 0:
        rep = evaluate_epoch(0)
        log_lines.append({"epoch": 0, "trained": False, "a_nat": rep.a_nat, "a_adv": rep.a_adv, "a_w": rep.a_w})
    for epoch in range(tc.epochs):
        if tc.mode == "mtard_joint":
            metrics = train_epoch(model, train, teachers, tc, rng, state, config.seed)
        else:
            metrics = train_variant_epoch(model, train, tc, rng, state, seed=config.seed)
        rep = evaluate_epoch(epoch + 1)
        log_lines.append({"epoch": epoch + 1, "trained": True, **metrics,
                          "a_nat": rep.a_nat, "a_adv": rep.a_adv, "a_w": rep.a_w})
        if best_a_w is None or rep.a_w > best_a_w:
            best_epoch, best_a_w = epoch + 1, rep.a_w
            save_checkpoint(ckpt, model, state, chash)
    (out / "metrics.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in log_lines))

    if best_epoch is not None:
        model = load_checkpoint(ckpt, config.model).model
    reports = {}
    for i, family in enumerate(config.attacks):
        if family == "adaptive" and model.detector is None:
            continue
        spec = standard_spec(family, tc.train_attack.epsilon)
        reports[family] = evaluate(model, hold.images, hold.labels, spec,
                                   np.random.default_rng([config.seed, 10_000 + i])).to_dict()
    _write_json(out / "reports.json", reports)

    fdir = out / "filters"
    fdir.mkdir(exist_ok=True)
    write_filter_csv(fdir / "student.csv", model_filter_stats(model))
    if teachers is not None:
        write_filter_csv(fdir / "t_nat.csv", model_filter_stats(teachers.t_nat))
        write_filter_csv(fdir / "t_adv.csv", model_filter_stats(teachers.t_adv))

    summary = {"best_epoch": best_epoch, "best_a_w": best_a_w, "config_hash": chash,
               "seed": config.seed, "mode": tc.mode}
    if model.detector is not None:
        summary["detector"] = detector_accuracy(model, hold.images, hold.labels,
                                                training_spec(tc.train_attack.epsilon),
                                                np.random.default_rng([config.seed, 20_000]))
    _write_json(out / "summary.json", summary)
    return RunResult(out, best_epoch, best_a_w, reports, summary, model)


# ---------------------------------------------------------------------------
# ablation


ABLATION_ROWS = {
    "dynamic": dict(dynamic_weight=True, mixbn=False, type_blend=False, detector=True),
    "dynamic_mixbn": dict(dynamic_weight=True, mixbn=True, type_blend=False, detector=True),
    "awnet": dict(dynamic_weight=True, mixbn=True, type_blend=True, detector=True),
    "baseline": None,
}


def ablation_configs(config: ExperimentConfig) -> dict[str, ExperimentConfig]:
    """The four component-ablation runs; each writes to ``<out>/<row>``."""
    out = {}
    for row, flags in ABLATION_ROWS.items():
        model = static_config(config.model) if flags is None else replace(config.model, **flags)
        out[row] = replace(config, model=model, out=str(Path(config.out) / row))
    return out


def ablate(config: ExperimentConfig, timings: dict | None = None) -> dict[str, RunResult]:
    """Run the grid with shared teachers and a shared detector backbone.

    If ``timings`` is given it receives the CPU seconds of each stage
    (``teachers``, ``extractor`` and one entry per row); they are kept out of
    the written artifacts so reruns stay byte-identical.
    """
    timings = {} if timings is None else timings
    configs = ablation_configs(config)
    train, _ = load_dataset(config.dataset, config.seed)
    teachers = None
    t0 = time.process_time()
    if config.train.mode == "mtard_joint":
        teachers = train_teachers(config.model, train, config.train, config.teacher_epochs, config.seed)
    t1 = time.process_time()
    probe = AWNetModel(replace(config.model, detector=True, dynamic_weight=True), config.seed)
    pretrain_extractor(probe, train, config.extractor_epochs, seed=config.seed)
    shared = extractor_state_of(probe)
    timings.update(teachers=t1 - t0, extractor=time.process_time() - t1)
    results = {}
    for row, cfg in configs.items():
        start = time.process_time()
        results[row] = run(cfg, teachers, shared)
        timings[row] = time.process_time() - start
    table = {row: {"best_a_w": r.best_a_w, "best_epoch": r.best_epoch,
                   "detector": r.summary.get("detector"),
                   "final_a_w": {k: v["a_w"] for k, v in r.reports.items()}}
             for row, r in results.items()}
    _write_json(Path(config.out) / "ablation.json", table)
    return results


# ---------------------------------------------------------------------------
# plot export


def export_plots(run_dir: str | Path) -> list[Path]:
    """Histogram and scatter CSVs per model and conv layer, with bins shared across models.

    Writes ``plots/hist_<model>_<layer>.csv`` (bin_left, bin_right, count),
    ``plots/scatter_<model>_<layer>.csv`` (index, mean, variance) and
    ``plots/comparisons.json`` (KS statistic and variance ratio of every model
    against the first one).
    """
    run_dir = Path(run_dir)
    fdir = run_dir / "filters"
    required = [run_dir / "config.txt", fdir]
    missing = [str(p) for p in required if not p.exists()]
    csvs = sorted(fdir.glob("*.csv")) if fdir.exists() else []
    if not csvs:
        missing.append(str(fdir / "*.csv"))
    if missing:
        raise FileNotFoundError(f"missing run artifacts: {missing}")
    stats = {p.stem: read_filter_csv(p) for p in csvs}
    pdir = run_dir / "plots"
    pdir.mkdir(exist_ok=True)
    written = []
    layer_sets = [{s.layer for s in v} for v in stats.values()]
    common = [s.layer for s in next(iter(stats.values())) if all(s.layer in ls for ls in layer_sets)]
    for layer in sorted({s.layer for v in stats.values() for s in v}):
        per_model = {name: next(s for s in v if s.layer == layer) for name, v in stats.items()
                     if any(s.layer == layer for s in v)}
        edges = shared_bins(*[s.means for s in per_model.values()])
        for name, s in per_model.items():
            counts, _ = np.histogram(s.means, edges)
            hpath = pdir / f"hist_{name}_{layer}.csv"
            hpath.write_text("bin_left,bin_right,count\n" + "".join(
                f"{float(edges[i])!r},{float(edges[i + 1])!r},{int(c)}\n" for i, c in enumerate(counts)))
            spath = pdir / f"scatter_{name}_{layer}.csv"
            spath.write_text("index,mean,variance\n" + "".join(
                f"{i},{float(m)!r},{float(v)!r}\n" for i, (m, v) in enumerate(zip(s.means, s.variances))))
            written += [hpath, spath]
    names = list(stats)
    comparisons = {}
    for other in names[1:]:
        keep_a = [s for s in stats[names[0]] if s.layer in common]
        keep_b = [s for s in stats[other] if s.layer in common]
        cmp = compare_distributions(keep_a, keep_b)
        comparisons[f"{names[0]}_vs_{other}"] = {
            c.layer: {"ks": c.ks, "variance_ratio": c.variance_ratio} for c in cmp.layers}
    _write_json(pdir / "comparisons.json", comparisons)
    written.append(pdir / "comparisons.json")
    return written


def result_dict(result: RunResult) -> dict:
    return {"out": str(result.out), "best_epoch": result.best_epoch, "best_a_w": result.best_a_w,
            "summary": result.summary}


__all__ = [
    "RunFailure", "RunResult", "load_dataset", "run", "ablate", "ablation_configs",
    "export_plots", "detector_accuracy", "selection_spec",
]
