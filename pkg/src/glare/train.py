"""Training loop, evaluation metrics and the ablation harness."""
from __future__ import annotations

import gc
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import stats

from .errors import NumericError, SchemaError
from .features import Dataset, Featurizer, RawSample
from .graph import message_count
from .model import (GlareConfig, GlareModel, PreparedGraph, backward_batch, collate, forward_batch,
                    init_params, prepare_sample)
from .numerics import AdamState, adam_step, softmax_cross_entropy_batch
from .seeding import subseed, substream

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 1
    early_stop: int = 0  # patience in evaluations; 0 disables

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise SchemaError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: GlareModel
    history: list[dict]
    best_epoch: int
    best_val_accuracy: float
    initial_flat: np.ndarray


def run_config(glare_config: GlareConfig, dataset: Dataset, seed: int) -> GlareConfig:
    """The model config actually used for a run: class count from the data,
    k-means seed from the run seed."""
    if glare_config.n_classes != dataset.n_classes:
        raise SchemaError(f"model has {glare_config.n_classes} classes, dataset has {dataset.n_classes}")
    return replace(glare_config, kmeans_seed=subseed(seed, "kmeans"))


def _batches(graphs: list[PreparedGraph], labels: np.ndarray, size: int, use_quotient: bool):
    for start in range(0, len(graphs), size):
        yield collate(graphs[start:start + size], use_quotient), labels[start:start + size]


def _split_loss_acc(graphs, labels, params, batch_size, use_quotient) -> tuple[float, float]:
    total, correct = 0.0, 0
    for batch, y in _batches(graphs, labels, batch_size, use_quotient):
        logits, _ = forward_batch(batch, params, keep_cache=False)
        losses, _ = softmax_cross_entropy_batch(logits, y)
        total += float(losses.sum())
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return total / len(labels), correct / len(labels)


def train(dataset: Dataset, glare_config: GlareConfig, train_config: TrainConfig) -> TrainResult:
    """Adam on mean cross-entropy; keeps the weights of the best validation epoch."""
    train_idx = dataset.splits.get("train", [])
    val_idx = dataset.splits.get("val", [])
    if not train_idx or not val_idx:
        raise SchemaError("training needs non-empty train and val splits")
    tc = train_config
    config = run_config(glare_config, dataset, tc.seed)
    featurizer = Featurizer.fit(dataset.split("train"), config.f, config.feature_mode)
    prepared = {i: prepare_sample(dataset.samples[i], featurizer, config)
                for i in sorted(set(train_idx) | set(val_idx))}
    all_labels = np.array([s.label for s in dataset.samples], dtype=np.int64)
    val_graphs = [prepared[i] for i in val_idx]
    val_labels = all_labels[val_idx]

    params = init_params(config, subseed(tc.seed, "init"))
    initial = params.flat.copy()
    opt = AdamState.create(params.size, tc.lr, tc.beta1, tc.beta2, tc.eps)
    shuffle = substream(tc.seed, "shuffle")
    log.info("training %d parameters on %d samples", params.size, len(train_idx))

    history = []
    best_flat, best_acc, best_epoch = params.flat.copy(), -1.0, 0
    since_best = 0
    train_idx = np.asarray(train_idx)
    for epoch in range(1, tc.epochs + 1):
        order = train_idx[shuffle.permutation(len(train_idx))]
        loss_sum = 0.0
        for step, start in enumerate(range(0, len(order), tc.batch_size)):
            chunk = order[start:start + tc.batch_size]
            batch = collate([prepared[i] for i in chunk], config.use_quotient)
            logits, cache = forward_batch(batch, params)
            losses, d_logits = softmax_cross_entropy_batch(logits, all_labels[chunk])
            batch_loss = float(losses.sum())
            if not np.isfinite(batch_loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            loss_sum += batch_loss
            grads = backward_batch(cache, d_logits / len(chunk), params)
            params.assign(adam_step(opt, params.flat, grads.flat))
        row = {"epoch": epoch, "train_loss": loss_sum / len(order)}
        if epoch % tc.eval_every == 0 or epoch == tc.epochs:
            val_loss, val_acc = _split_loss_acc(val_graphs, val_labels, params, 256, config.use_quotient)
            row["val_loss"], row["val_accuracy"] = val_loss, val_acc
            if val_acc > best_acc:
                best_flat, best_acc, best_epoch = params.flat.copy(), val_acc, epoch
                since_best = 0
            else:
                since_best += 1
        history.append(row)
        log.debug("epoch %d: %s", epoch, row)
        if tc.early_stop and since_best >= tc.early_stop:
            break

    params.assign(best_flat)
    return TrainResult(GlareModel(config, params, featurizer), history, best_epoch, best_acc, initial)


# --------------------------------------------------------------------------
# evaluation

@dataclass
class Metrics:
    accuracy: float
    per_class_accuracy: list[float | None]
    per_class_precision: list[float | None]
    confusion: list[list[int]]  # rows = true class, columns = predicted
    mean_loss: float
    batch_ms: float
    seed: int
    class_names: list[str] = field(default_factory=list)

    @property
    def support(self) -> list[int]:
        return [int(sum(row)) for row in self.confusion]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["support"] = self.support
        return d


def confusion_metrics(y_true, y_pred, n_classes: int) -> tuple[np.ndarray, list, list]:
    """Confusion matrix, recall and precision; undefined ratios are ``None``."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    recall = [float(cm[c, c] / rows[c]) if rows[c] else None for c in range(n_classes)]
    precision = [float(cm[c, c] / cols[c]) if cols[c] else None for c in range(n_classes)]
    return cm, recall, precision


def evaluate(model: GlareModel, dataset: Dataset, split: str = "test", batch_size: int = 32,
             seed: int = 0) -> Metrics:
    """Argmax predictions over a split. Timing covers graph construction and
    the forward pass, median over batches after one untimed warm-up batch."""
    samples = dataset.split(split)
    if not samples:
        raise SchemaError(f"split {split!r} is empty")
    labels = dataset.labels(split)
    logits, times = _predict_timed(model, samples, batch_size)
    losses, _ = softmax_cross_entropy_batch(logits, labels)
    pred = np.argmax(logits, axis=1)
    cm, recall, precision = confusion_metrics(labels, pred, dataset.n_classes)
    return Metrics(float(np.trace(cm) / cm.sum()), recall, precision, cm.tolist(),
                   float(losses.mean()), float(np.median(times)), seed, list(dataset.class_names))


def _predict_timed(model: GlareModel, samples: list[RawSample], batch_size: int):
    model.logits(samples[:batch_size], batch_size)  # warm-up
    out, times = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        t0 = time.perf_counter()
        out.append(model.logits(chunk, batch_size))
        times.append((time.perf_counter() - t0) * 1e3)
    return np.concatenate(out), np.asarray(times)


def time_forward(entries: list[tuple[GlareModel, list[RawSample]]], batch_size: int = 32,
                 rounds: int = 20, quantile: float = 0.1, seed: int = 0) -> list[float]:
    """Network inference time per batch (ms) for several models at once.

    Graphs are built and collated up front, so only the forward pass is
    timed. Every round runs every (model, batch) pair once in a shuffled
    order, which spreads machine drift evenly over the models. A model's
    figure is the mean over its batches of the ``quantile`` of that batch's
    timings across rounds.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    jobs = []
    for e, (model, samples) in enumerate(entries):
        graphs = model.prepare(samples)
        for start in range(0, len(graphs), batch_size):
            batch = collate(graphs[start:start + batch_size], model.config.use_quotient)
            jobs.append((e, model.params, batch))
    for _, params, batch in jobs:  # warm-up
        forward_batch(batch, params, keep_cache=False)
    order_rng = np.random.default_rng(seed)
    times = np.empty((rounds, len(jobs)))
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for r in range(rounds):
            for j in order_rng.permutation(len(jobs)):
                _, params, batch = jobs[j]
                t0 = time.perf_counter()
                forward_batch(batch, params, keep_cache=False)
                times[r, j] = time.perf_counter() - t0
    finally:
        if gc_was_enabled:
            gc.enable()
    per_job = np.quantile(times, quantile, axis=0) * 1e3
    owner = np.array([e for e, _, _ in jobs])
    return [float(per_job[owner == e].mean()) for e in range(len(entries))]


def time_inference(model: GlareModel, samples: list[RawSample], batch_size: int = 32,
                   rounds: int = 20) -> float:
    return time_forward([(model, samples)], batch_size, rounds)[0]


def per_sample_correct(model: GlareModel, dataset: Dataset, split: str) -> np.ndarray:
    logits = model.logits(dataset.split(split))
    return (np.argmax(logits, axis=1) == dataset.labels(split)).astype(np.float64)


def paired_ttest(correct_a, correct_b) -> tuple[float, float]:
    """Paired t-test over per-sample correctness of two runs on the same split."""
    a = np.asarray(correct_a, dtype=np.float64)
    b = np.asarray(correct_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have the same length")
    if np.array_equal(a, b):
        return 0.0, 1.0
    res = stats.ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue)


# --------------------------------------------------------------------------
# ablations

@dataclass
class AblationRow:
    setting: str
    mean_accuracy: float
    std_accuracy: float
    mean_batch_ms: float
    accuracies: list[float]
    extra: dict = field(default_factory=dict)


@dataclass
class AblationReport:
    kind: str
    rows: list[AblationRow] = field(default_factory=list)

    def row(self, setting: str) -> AblationRow:
        return next(r for r in self.rows if r.setting == setting)


def _train_setting(dataset, glare_config, train_config, seeds, split):
    accs, models = [], []
    for seed in seeds:
        res = train(dataset, glare_config, replace(train_config, seed=seed))
        accs.append(evaluate(res.model, dataset, split, train_config.batch_size, seed).accuracy)
        models.append(res.model)
    return accs, models


def _report(kind, settings, dataset, glare_config, train_config, seeds, split, timing_rounds):
    """Train every (setting, seed), then time all resulting models together."""
    trained = []
    for name, cfg, extra in settings:
        accs, models = _train_setting(dataset, cfg, train_config, seeds, split)
        trained.append((name, accs, models, extra))
    samples = dataset.split(split)
    entries = [(m, samples) for _, _, models, _ in trained for m in models]
    ms = time_forward(entries, train_config.batch_size, timing_rounds) if entries else []
    report = AblationReport(kind)
    pos = 0
    for name, accs, models, extra in trained:
        report.rows.append(_row(name, accs, ms[pos:pos + len(models)], extra))
        pos += len(models)
    return report


def _row(setting, accs, times, extra=None) -> AblationRow:
    std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    return AblationRow(setting, float(np.mean(accs)), std, float(np.mean(times)),
                       [float(a) for a in accs], extra or {})


def ablate_regions(dataset: Dataset, k_list, seeds, glare_config: GlareConfig,
                   train_config: TrainConfig, split: str = "test", timing_rounds: int = 20) -> AblationReport:
    if len(seeds) < 3:
        log.warning("fewer than 3 seeds; the std column is not meaningful")
    settings = []
    for k in sorted(set(int(k) for k in k_list)):
        if k < 2 or k > dataset.n_landmarks:
            log.warning("skipping infeasible region count k=%d", k)
            continue
        settings.append((str(k), replace(glare_config, k_regions=k, use_quotient=True), {"k_regions": k}))
    return _report("regions", settings, dataset, glare_config, train_config, seeds, split, timing_rounds)


def ablate_features(dataset: Dataset, modes, seeds, glare_config: GlareConfig,
                    train_config: TrainConfig, split: str = "test", timing_rounds: int = 5) -> AblationReport:
    settings = [(mode, replace(glare_config, feature_mode=mode), {"feature_mode": mode})
                for mode in dict.fromkeys(modes)]
    return _report("features", settings, dataset, glare_config, train_config, seeds, split, timing_rounds)


def stack_message_counts(config: GlareConfig, n_nodes: int) -> dict[str, int]:
    """Per-layer message counts of both stacks for a kNN-built graph of ``n_nodes``."""
    fine = n_nodes * min(config.k_nn, n_nodes - 1)
    if config.use_quotient:
        region = config.k_regions * min(config.k_q, config.k_regions - 1)
    else:
        region = fine
    return {"fine_per_layer": fine, "region_per_layer": region,
            "fine_total": message_count(np.zeros((fine, 2)), config.fine_layers),
            "region_total": message_count(np.zeros((region, 2)), config.region_layers)}


def ablate_quotient(dataset: Dataset, seeds, glare_config: GlareConfig, train_config: TrainConfig,
                    split: str = "test", timing_rounds: int = 10) -> AblationReport:
    n = dataset.n_landmarks
    with_q = stack_message_counts(replace(glare_config, use_quotient=True), n)
    ratio = with_q["fine_per_layer"] / with_q["region_per_layer"]
    settings = []
    for use_q in (True, False):
        cfg = replace(glare_config, use_quotient=use_q)
        counts = stack_message_counts(cfg, n)
        counts["message_ratio"] = ratio
        settings.append(("quotient" if use_q else "no-quotient", cfg, counts))
    return _report("quotient", settings, dataset, glare_config, train_config, seeds, split, timing_rounds)
