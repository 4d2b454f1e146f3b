"""Optimization: loss, Adam, cosine schedule and the plugin training loops.

All gradients are hand-derived and flow only into plugin parameters; the
base encoder is frozen by contract during any plugin training and this is
enforced, not assumed. Runs are deterministic for a given config and seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import adapters, encoder
from .data import LoadedData
from .errors import DataError, FrozenParamsError, ShapeError, TrainingDivergedError
from .util import rng_for, softmax


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    convergence_loss: float = 1e-6
    seed: int = 0

    def validate(self) -> None:
        if self.lr_min > self.lr_max:
            raise ShapeError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ShapeError("batch_size, max_epochs and patience must be positive")


def cross_entropy(logits: np.ndarray, target: int, active: np.ndarray | None = None) -> float:
    """Negative log-likelihood of the target class, via log-sum-exp.

    logits is one unnormalized score vector; active optionally restricts
    the normalization to a subset of classes.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ShapeError("cross_entropy expects a single logit vector")
    k = logits.shape[0]
    if not (0 <= target < k):
        raise ShapeError(f"target {target} outside 0..{k - 1}")
    if active is not None:
        active = np.asarray(active, dtype=bool)
        if not active[target]:
            raise ShapeError(f"target {target} is masked inactive")
        logits = np.where(active, logits, -np.inf)
    m = logits.max()
    lse = m + np.log(np.sum(np.exp(logits - m)))
    return float(lse - logits[target])


def cross_entropy_batch(logits: np.ndarray, targets: np.ndarray,
                        active: np.ndarray | None = None) -> float:
    """Mean cross-entropy over a batch of logit rows."""
    z = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if active is not None:
        z = np.where(np.asarray(active, dtype=bool), z, -np.inf)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(z - m), axis=1))
    picked = z[np.arange(z.shape[0]), targets]
    if not np.all(np.isfinite(picked)):
        bad = int(targets[~np.isfinite(picked)][0])
        raise ShapeError(f"target {bad} is masked inactive")
    return float(np.mean(lse - picked))


@dataclass
class OptimizerState:
    """Adam moments per parameter group plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(state: OptimizerState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              frozen: frozenset[str] = frozenset()) -> None:
    """One bias-corrected Adam update, in place.

    Frozen groups are skipped entirely, bits untouched, moments included.
    A non-finite gradient aborts naming the offending group.
    """
    state.t += 1
    t = state.t
    for name, p in params.items():
        if name in frozen:
            continue
        if name not in grads:
            raise ShapeError(f"no gradient supplied for group '{name}'")
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient in group '{name}'")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)


def cosine_lr(t: int, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay from lr_max at t=0 to lr_min at t=total."""
    if total < 1:
        raise ShapeError("schedule length must be at least 1")
    if not (0 <= t <= total):
        raise ShapeError(f"schedule step {t} outside 0..{total}")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * t / total))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class TrainReport:
    plugin_id: str
    version: int
    records: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = "max-epochs"
    wall_time: float = 0.0  # kept in memory only, never exported

    @property
    def final_val_acc(self) -> float:
        return self.records[-1].val_acc if self.records else 0.0

    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.records]


def write_train_report(report: TrainReport, path) -> None:
    """Delimited epoch records; wall time deliberately omitted."""
    lines = ["epoch,lr,train_loss,val_loss,val_acc"]
    for r in report.records:
        lines.append(f"{r.epoch},{r.lr!r},{r.train_loss!r},{r.val_loss!r},{r.val_acc!r}")
    lines.append(f"# plugin={report.plugin_id} version={report.version} "
                 f"stop_reason={report.stop_reason}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_train_report(path) -> TrainReport:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    records = []
    meta = {"plugin": "?", "version": "0", "stop_reason": "?"}
    for ln in lines[1:]:
        if ln.startswith("#"):
            for tok in ln[1:].split():
                k, _, v = tok.partition("=")
                meta[k] = v
            continue
        e, lr, tl, vl, va = ln.split(",")
        records.append(EpochRecord(int(e), float(lr), float(tl), float(vl), float(va)))
    return TrainReport(meta["plugin"], int(meta["version"]), records, meta["stop_reason"])


def _batch_loss_and_grads(base: encoder.EncoderParams, plugin: adapters.MoeLoraPlugin,
                          xb: np.ndarray, rows: np.ndarray):
    """Cross-entropy over active head rows; gradients for plugin params only."""
    emb, cache = encoder.forward_cache(base, xb, plugin)
    logits = adapters.head_logits(plugin.head, emb)
    active = plugin.head.active
    loss = cross_entropy_batch(logits, rows, active)
    masked = np.where(active, logits, np.array(-np.inf, dtype=logits.dtype))
    probs = softmax(masked, axis=1)
    probs[:, ~active] = 0.0
    dlogits = probs
    dlogits[np.arange(len(rows)), rows] -= 1.0
    dlogits /= len(rows)
    grads = encoder.backward_adapted(base, plugin, cache, dlogits @ plugin.head.weight)
    grads["head.weight"] = dlogits.T @ emb
    grads["head.bias"] = dlogits.sum(axis=0)
    return loss, grads


def _evaluate(base, plugin, x, rows):
    emb, _ = encoder.forward_cache(base, x, plugin)
    logits = adapters.head_logits(plugin.head, emb)
    active = plugin.head.active
    loss = cross_entropy_batch(logits, rows, active)
    masked = np.where(active, logits, np.array(-np.inf, dtype=logits.dtype))
    acc = float(np.mean(np.argmax(masked, axis=1) == rows))
    return loss, acc


def _fit(base: encoder.EncoderParams, plugin: adapters.MoeLoraPlugin,
         x_train: np.ndarray, rows_train: np.ndarray,
         x_val: np.ndarray, rows_val: np.ndarray,
         cfg: TrainConfig, extra_train: np.ndarray | None = None) -> TrainReport:
    """Mini-batch Adam with cosine decay and patience-based early stopping.

    extra_train is an index array re-appended every epoch, the oversampling
    hook for rare classes. Mutates plugin in place; caller owns copies.
    """
    cfg.validate()
    if not base.frozen:
        raise FrozenParamsError("plugin training requires a frozen base encoder")
    if x_train.shape[0] == 0 or x_val.shape[0] == 0:
        raise DataError("training and validation sets must be nonempty")
    params = plugin.trainable_params()
    state = OptimizerState.for_params(params)
    rng = rng_for(cfg.seed, f"fit:{plugin.plugin_id}")
    pool = np.arange(x_train.shape[0])
    if extra_train is not None and extra_train.size:
        pool = np.concatenate([pool, extra_train])

    report = TrainReport(plugin.plugin_id, plugin.version)
    started = time.perf_counter()
    best = np.inf
    bad = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = cosine_lr(epoch - 1, cfg.max_epochs, cfg.lr_max, cfg.lr_min)
        order = pool[rng.permutation(pool.size)]
        total = 0.0
        n_batches = 0
        for lo in range(0, order.size, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss, grads = _batch_loss_and_grads(base, plugin, x_train[idx], rows_train[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
            adam_step(state, params, grads, lr, cfg.beta1, cfg.beta2, cfg.eps)
            total += loss
            n_batches += 1
        train_loss = total / n_batches
        val_loss, val_acc = _evaluate(base, plugin, x_val, rows_val)
        report.records.append(EpochRecord(epoch, float(lr), train_loss, val_loss, val_acc))
        if train_loss <= cfg.convergence_loss:
            report.stop_reason = "converged"
            break
        if val_loss < best:
            best = val_loss
            bad = 0
        else:
            bad += 1
            if bad >= cfg.patience:
                report.stop_reason = "early-stopped"
                break
    report.wall_time = time.perf_counter() - started
    return report


def _activate_missing(head: adapters.ClassificationHead, labels: np.ndarray) -> list[int]:
    """Bind any unbound labels, ascending, returning the newly added ones."""
    missing = sorted(set(int(l) for l in labels) - set(head.labels))
    for label in missing:
        adapters.activate_class(head, label)
    return missing


def _rows_for(head: adapters.ClassificationHead, labels: np.ndarray) -> np.ndarray:
    lookup = {label: row for row, label in enumerate(head.labels)}
    try:
        return np.asarray([lookup[int(l)] for l in labels], dtype=np.int64)
    except KeyError as e:
        raise ShapeError(f"label {e.args[0]} is not bound to any head row") from None


def train_plugin(base: encoder.EncoderParams, plugin: adapters.MoeLoraPlugin,
                 train_data, val_data, cfg: TrainConfig):
    """Train a tissue plugin on (X, labels) pairs with global class labels.

    Unbound labels get head rows first (ascending, deterministic). Returns
    (trained copy with version + 1, TrainReport); the input plugin and the
    frozen base are untouched.
    """
    x_train, y_train = train_data
    x_val, y_val = val_data
    out = plugin.copy()
    out.version = plugin.version + 1
    _activate_missing(out.head, np.concatenate([y_train, y_val]))
    rows_train = _rows_for(out.head, y_train)
    rows_val = _rows_for(out.head, y_val)
    x_train = np.asarray(x_train, dtype=base.dtype)
    x_val = np.asarray(x_val, dtype=base.dtype)
    report = _fit(base, out, x_train, rows_train, x_val, rows_val, cfg)
    report.version = out.version
    out.provenance = dict(out.provenance,
                          trained_on=int(x_train.shape[0]), seed=cfg.seed)
    return out, report


def train_tissue_assignment(base: encoder.EncoderParams, plugin: adapters.MoeLoraPlugin,
                            train_data, val_data, cfg: TrainConfig):
    """Same loop as train_plugin but targets are tissue indices."""
    if plugin.kind != "tissue-assignment":
        raise ShapeError("train_tissue_assignment needs a tissue-assignment plugin")
    return train_plugin(base, plugin, train_data, val_data, cfg)


def oversample_to_median(labels: np.ndarray, boost_classes: set[int]) -> np.ndarray:
    """Extra indices that bring each boosted class up to the median count."""
    labels = np.asarray(labels, dtype=np.int64)
    classes, counts = np.unique(labels, return_counts=True)
    median = int(np.median(counts))
    extras = []
    for cls, count in zip(classes, counts):
        if int(cls) in boost_classes and count < median:
            idx = np.nonzero(labels == cls)[0]
            reps = np.resize(idx, median - count)
            extras.append(reps)
    if not extras:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(extras)


def incremental_train(base: encoder.EncoderParams, registry: adapters.PluginRegistry,
                      store, datasets, vocab, new_data: LoadedData, tissue: int,
                      cfg: TrainConfig):
    """Fold labeled novel cells into an existing tissue plugin.

    new_data must already be normalized like the stored tissue pool. Novel
    labels are auto-activated, the merged pool is retrained from a warm
    start with novel cells oversampled to the median class size, the new
    cells are encoded and inserted into both vector sub-stores, and the
    bumped plugin version is registered. Returns (plugin, report).
    """
    from . import memory as memory_mod

    if new_data.matrix.n_cells < 1:
        raise DataError("incremental training needs at least one new cell")
    current = registry.latest_for_tissue(tissue)
    plugin = current.copy()
    plugin.version = current.version + 1

    novel = _activate_missing(plugin.head, new_data.labels())
    merged = datasets.merge_new(tissue, new_data)

    pool = datasets.get(tissue)
    x_all = pool.data.matrix.to_dense().astype(base.dtype)
    y_all = pool.data.labels()
    train_rows = pool.train_rows
    val_rows = pool.val_rows
    extra = oversample_to_median(y_all[train_rows], set(novel))
    report = _fit(base, plugin,
                  x_all[train_rows], _rows_for(plugin.head, y_all[train_rows]),
                  x_all[val_rows], _rows_for(plugin.head, y_all[val_rows]),
                  cfg, extra_train=extra)
    report.version = plugin.version
    plugin.provenance = dict(plugin.provenance, dataset_id=merged,
                             novel_labels=[int(n) for n in novel])
    registry.register_plugin(plugin)

    new_x = new_data.matrix.to_dense().astype(base.dtype)
    f_g = encoder.encode_matrix(base, new_x)
    f_s = encoder.encode_matrix(base, new_x, plugin)
    for i, meta in enumerate(new_data.metadata):
        memory_mod.insert(store, "g", memory_mod.EmbeddingRecord(
            f_g[i], meta.cell_type, meta.tissue, "standard", meta.cell_id))
        memory_mod.insert(store, "s", memory_mod.EmbeddingRecord(
            f_s[i], meta.cell_type, meta.tissue, "lora-enhanced", meta.cell_id))
    return plugin, report
