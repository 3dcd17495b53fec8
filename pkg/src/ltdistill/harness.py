"""End-to-end experiments on synthetic long-tailed mixtures.

A pipeline run for one seed goes: mixture -> long-tailed train set and a
balanced test set -> teacher -> distilled set -> per-epoch soft labels ->
(optionally) ADSA calibration -> evaluation model -> metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import adsa
from .config import ExperimentConfig, NetConfig
from .distill import DistillConfig, DistilledSet, class_feature_stats, class_means, distill_images
from .longtail import (
    LabeledSet,
    MixtureSpec,
    balanced_counts,
    class_prior,
    exponential_counts,
    feature_scale,
    gaussian_mixture_generate,
    perturbation_counts,
    subsample_longtail,
)
from .model import MlpModel, TrainConfig, forward, init_mlp, train
from .numcore import DomainError, RngStream, row_entropy, softmax
from .softlabel import SoftLabelSet, ensemble_mean_probs, model_checksum, relabel

CONFIG_IDS = ("C1", "C2", "C3", "C4")
# (image teacher imbalanced, label teacher imbalanced)
CONFIG_ROLES = {"C1": (True, False), "C2": (False, True), "C3": (True, True), "C4": (False, False)}


@dataclass
class MetricsReport:
    per_class_accuracy: np.ndarray
    per_class_confidence: np.ndarray
    per_class_entropy: np.ndarray
    test_counts: np.ndarray
    train_counts: np.ndarray
    splits: list
    overall_accuracy: float
    split_accuracy: dict
    manifest: dict = field(default_factory=dict)
    softlabel_confidence: np.ndarray | None = None
    softlabel_entropy: np.ndarray | None = None

    def group_mean(self, values, classes) -> float:
        classes = np.asarray(classes, dtype=np.int64)
        w = self.test_counts[classes].astype(np.float64)
        return float(np.dot(w, np.asarray(values)[classes]) / w.sum())


def split_thresholds(cfg_metrics, base_count: float) -> tuple[float, float]:
    """Head/tail thresholds rescaled by ``base_count / reference_count``."""
    scale = base_count / cfg_metrics.reference_count
    return cfg_metrics.head_threshold * scale, cfg_metrics.tail_threshold * scale


def assign_splits(train_counts, head_threshold: float = 100, tail_threshold: float = 20) -> list:
    out = []
    for c in np.asarray(train_counts):
        out.append("head" if c >= head_threshold else "mid" if c >= tail_threshold else "tail")
    return out


def compute_metrics(model: MlpModel, test: LabeledSet, train_counts,
                    head_threshold: float = 100, tail_threshold: float = 20) -> MetricsReport:
    """Per-class accuracy, ground-truth confidence and prediction entropy on ``test``."""
    k = test.num_classes
    counts = test.class_counts
    if np.any(counts == 0):
        raise DomainError(f"class {int(np.argmin(counts))} is absent from the test set")
    probs = softmax(forward(model, test.features)[0], axis=1)
    y = test.labels
    correct = (np.argmax(probs, axis=1) == y).astype(np.float64)
    conf = probs[np.arange(y.size), y]
    ent = row_entropy(probs)
    acc = np.bincount(y, weights=correct, minlength=k) / counts
    conf_c = np.bincount(y, weights=conf, minlength=k) / counts
    ent_c = np.bincount(y, weights=ent, minlength=k) / counts
    splits = assign_splits(train_counts, head_threshold, tail_threshold)
    report = MetricsReport(acc, conf_c, ent_c, counts.copy(), np.asarray(train_counts).copy(),
                           splits, float(correct.mean()), {})
    for name in ("head", "mid", "tail"):
        members = [i for i, s in enumerate(splits) if s == name]
        report.split_accuracy[name] = report.group_mean(acc, members) if members else float("nan")
    return report


def net_train_config(net: NetConfig, rng: RngStream) -> TrainConfig:
    return TrainConfig(net.epochs, net.batch_size, net.learning_rate, net.momentum,
                       net.weight_decay, net.resample, rng)


def fit_net(data: LabeledSet, net: NetConfig, rng: RngStream) -> MlpModel:
    model = init_mlp((data.dim, net.hidden, data.num_classes), net.activation, rng.child("init"))
    return train(model, data.features, data.labels, net_train_config(net, rng.child("sgd")))


def distill_from(teacher: MlpModel, data: LabeledSet, cfg: ExperimentConfig, rng: RngStream) -> DistilledSet:
    d = cfg.distill
    dcfg = DistillConfig(d.steps, d.learning_rate, d.reg_weight, d.init, d.init_scale, rng)
    return distill_images(teacher, class_feature_stats(teacher, data), d.ipc, dcfg,
                          init_centers=class_means(data), scale=feature_scale(data))


def softlabel_stats(probs, labels, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class mean ground-truth confidence and entropy of label rows."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 3:
        probs = probs[0] if np.all(probs == probs[0]) else probs.mean(axis=0)
    counts = np.bincount(labels, minlength=k)
    conf = np.bincount(labels, weights=probs[np.arange(labels.size), labels], minlength=k) / counts
    ent = np.bincount(labels, weights=row_entropy(probs), minlength=k) / counts
    return conf, ent


def train_eval_model(dd: DistilledSet, label_probs, cfg: ExperimentConfig, rng: RngStream,
                     schedule_k: int | None = None) -> MlpModel:
    """Soft-target CE on the clean distilled inputs; slice ``epoch % k`` per epoch."""
    label_probs = np.asarray(label_probs, dtype=np.float64)
    if label_probs.ndim == 2:
        label_probs = label_probs[None]
    if label_probs.shape[1] != len(dd.labels):
        raise DomainError("soft labels do not match the distilled set")
    net = cfg.eval.net
    k = label_probs.shape[2]
    model = init_mlp((dd.features.shape[1], net.hidden, k), net.activation, rng.child("init"))
    return train(model, dd.features, label_probs, net_train_config(net, rng.child("sgd")),
                 labels=dd.labels, schedule_k=schedule_k)


def make_mixture(cfg: ExperimentConfig, seed: int) -> MixtureSpec:
    d = cfg.data
    return MixtureSpec.random(d.num_classes, d.dim, d.separation, RngStream(seed, ()).child("mixture"),
                              d.variance)


def make_datasets(cfg: ExperimentConfig, seed: int) -> tuple[LabeledSet, LabeledSet]:
    """Long-tailed train set and balanced test set for ``seed``."""
    d = cfg.data
    root = RngStream(seed)
    mix = make_mixture(cfg, seed)
    counts = exponential_counts(d.num_classes, d.base_count, d.imbalance_factor)
    train_set = gaussian_mixture_generate(mix, counts, root.child("train"))
    test_set = gaussian_mixture_generate(mix, balanced_counts(d.num_classes, d.test_per_class),
                                         root.child("test"))
    return train_set, test_set


@dataclass
class PipelineRun:
    seed: int
    train_counts: np.ndarray
    teachers: list
    distilled: DistilledSet
    soft_labels: list
    calibration: adsa.CalibrationResult | None
    label_probs: dict
    models: dict
    metrics: dict


def label_tables(soft_labels: list, prior, calibrations: list | None) -> np.ndarray:
    """Per-teacher (optionally calibrated) probabilities, averaged over teachers."""
    tables = []
    for i, sl in enumerate(soft_labels):
        if calibrations is not None:
            sl = adsa.calibrate_softlabel_set(sl, prior, calibrations[i])
        tables.append(sl.probs())
    return ensemble_mean_probs(tables)


def run_pipeline(cfg: ExperimentConfig, seed: int, train_set: LabeledSet | None = None,
                 test_set: LabeledSet | None = None, variants=None,
                 schedule_k: int | None = None) -> PipelineRun:
    root = RngStream(seed)
    if train_set is None or test_set is None:
        train_set, test_set = make_datasets(cfg, seed)
    k = train_set.num_classes
    variants = list(variants or cfg.eval.variants)
    teachers = [fit_net(train_set, cfg.teacher, root.child("teacher", i))
                for i in range(cfg.relabel.num_teachers)]
    dd = distill_from(teachers[0], train_set, cfg, root.child("distill"))
    scale = feature_scale(train_set)
    sls = [relabel(t, dd.features, cfg.relabel.epochs, cfg.relabel.jitter * scale,
                   root.child("relabel", i)) for i, t in enumerate(teachers)]
    prior = class_prior(train_set.class_counts)
    c = cfg.calibrate
    grid = adsa.TauGrid(c.lo, c.hi, c.step)
    cals = [adsa.optimize_tau(sl.logits, dd.labels, prior, grid, c.refine) for sl in sls]
    head, tail = split_thresholds(cfg.metrics, cfg.data.base_count)
    probs, models, metrics = {}, {}, {}
    for v in variants:
        probs[v] = label_tables(sls, prior, cals if v == "adsa" else None)
        models[v] = train_eval_model(dd, probs[v], cfg, root.child("eval"), schedule_k)
        m = compute_metrics(models[v], test_set, train_set.class_counts, head, tail)
        m.softlabel_confidence, m.softlabel_entropy = softlabel_stats(probs[v], dd.labels, k)
        metrics[v] = m
    return PipelineRun(seed, train_set.class_counts, teachers, dd, sls, cals[0], probs, models, metrics)


# --- perturbation analysis -------------------------------------------------

def perturbation_sets(cfg: ExperimentConfig, a: int, seed: int):
    """Balanced and perturbed train sets drawn from one shared pool, plus a test set."""
    d, p = cfg.data, cfg.perturb
    k = d.num_classes
    imb = perturbation_counts(a, p.total_budget, p.num_varied, k)
    bal = balanced_counts(k, int(round(p.total_budget / k)))
    root = RngStream(seed)
    mix = make_mixture(cfg, seed)
    pool = gaussian_mixture_generate(mix, np.maximum(imb, bal), root.child("pool"))
    balanced = subsample_longtail(pool, bal, root.child("balanced"))
    imbalanced = subsample_longtail(pool, imb, root.child("perturbed", a))
    test = gaussian_mixture_generate(mix, balanced_counts(k, d.test_per_class), root.child("test"))
    return balanced, imbalanced, test


def run_perturbation(config_id: str, a: int, cfg: ExperimentConfig, seed: int) -> MetricsReport:
    """One (config, a, seed) cell: fresh teachers, distill, relabel, evaluate.

    Classes ``0..num_varied-1`` are the varied classes.
    """
    if config_id not in CONFIG_ROLES:
        raise DomainError(f"unknown perturbation config {config_id!r}")
    img_imb, lab_imb = CONFIG_ROLES[config_id]
    balanced, imbalanced, test = perturbation_sets(cfg, a, seed)
    cell = RngStream(seed).child("perturb", config_id, a)
    img_data = imbalanced if img_imb else balanced
    img_teacher = fit_net(img_data, cfg.teacher, cell.child("image-teacher"))
    if img_imb == lab_imb:
        lab_teacher = img_teacher
    else:
        lab_teacher = fit_net(imbalanced if lab_imb else balanced, cfg.teacher, cell.child("label-teacher"))
    dd = distill_from(img_teacher, img_data, cfg, cell.child("distill"))
    sl = relabel(lab_teacher, dd.features, cfg.relabel.epochs,
                 cfg.relabel.jitter * feature_scale(img_data), cell.child("relabel"))
    probs = sl.probs()
    model = train_eval_model(dd, probs, cfg, cell.child("eval"))
    train_counts = imbalanced.class_counts
    head, tail = split_thresholds(cfg.metrics, cfg.data.base_count)
    report = compute_metrics(model, test, train_counts, head, tail)
    report.softlabel_confidence, report.softlabel_entropy = softlabel_stats(probs, dd.labels, test.num_classes)
    report.manifest = {
        "config": config_id, "a": int(a), "seed": int(seed),
        "image_teacher": model_checksum(img_teacher), "label_teacher": model_checksum(lab_teacher),
        "image_teacher_data": "perturbed" if img_imb else "balanced",
        "label_teacher_data": "perturbed" if lab_imb else "balanced",
        "train_counts": imbalanced.class_counts.tolist(),
        "varied_classes": list(range(cfg.perturb.num_varied)),
    }
    return report


def varied_split(report: MetricsReport, num_varied: int, values) -> tuple[float, float]:
    """(varied-class mean, non-varied-class mean) of a per-class vector."""
    k = len(report.test_counts)
    values = np.asarray(values, dtype=np.float64)
    return float(values[:num_varied].mean()), float(values[num_varied:k].mean())


def entropy_trend(cfg: ExperimentConfig, seed: int, config_id: str = "C3", sweep=None):
    """Varied-class soft-label entropy over the ``a`` sweep and its Spearman rho."""
    sweep = list(sweep or cfg.perturb.sweep)
    ent = []
    for a in sweep:
        r = run_perturbation(config_id, a, cfg, seed)
        ent.append(varied_split(r, cfg.perturb.num_varied, r.softlabel_entropy)[0])
    rho = spearmanr(sweep, ent).statistic
    return np.asarray(ent), float(rho)


@dataclass
class BiasDecomposition:
    epsilon_T: np.ndarray
    epsilon_I: np.ndarray
    residual: np.ndarray
    pairing: str = "eps_T: labelers on balanced-teacher images; eps_I: images under balanced labeler"

    def norms(self) -> dict:
        return {name: float(np.sqrt(np.mean(getattr(self, name) ** 2)))
                for name in ("epsilon_T", "epsilon_I", "residual")}


def bias_decomposition(tables: dict) -> BiasDecomposition:
    """Differences of per-item label tables from the four configs.

    ``tables[Ci]`` are M x K probability rows with matching item order.
    """
    missing = [c for c in CONFIG_IDS if c not in tables]
    if missing:
        raise DomainError(f"missing tables for {missing}")
    arrs = {c: np.asarray(tables[c], dtype=np.float64) for c in CONFIG_IDS}
    shape = arrs["C4"].shape
    for c, t in arrs.items():
        if t.shape != shape:
            raise DomainError(f"{c} table has shape {t.shape}, expected {shape}")
    eps_i = arrs["C1"] - arrs["C4"]
    eps_t = arrs["C2"] - arrs["C4"]
    resid = arrs["C3"] - (arrs["C4"] + eps_t + eps_i)
    return BiasDecomposition(eps_t, eps_i, resid)


def perturbation_tables(cfg: ExperimentConfig, a: int, seed: int) -> dict:
    """Label tables for the decomposition on shared image sets.

    One balanced and one perturbed teacher; images distilled from each
    with the same init stream so items correspond row by row.
    """
    balanced, imbalanced, _ = perturbation_sets(cfg, a, seed)
    cell = RngStream(seed).child("decompose", a)
    t_bal = fit_net(balanced, cfg.teacher, cell.child("balanced-teacher"))
    t_imb = fit_net(imbalanced, cfg.teacher, cell.child("perturbed-teacher"))
    img_bal = distill_from(t_bal, balanced, cfg, cell.child("distill"))
    img_imb = distill_from(t_imb, imbalanced, cfg, cell.child("distill"))

    def label(t, dd):
        return softmax(forward(t, dd.features)[0], axis=1)

    return {"C4": label(t_bal, img_bal), "C2": label(t_imb, img_bal),
            "C1": label(t_bal, img_imb), "C3": label(t_imb, img_imb), "labels": img_bal.labels}
