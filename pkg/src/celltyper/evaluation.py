"""Metrics, open-set baselines and the incremental-sample sweep.

All metric math is brute-force simple on purpose: per-class counts first,
averages second, so an independent oracle can reproduce every number
exactly. Label order is vocabulary order (ascending indices) with the
unknown sentinel last when present.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adapters, encoder, training
from .data import UNKNOWN, LoadedData, normalize, subset_loaded
from .errors import CalibrationError, DataError
from .planner import SystemState
from .util import rng_for


def _label_order(true, pred, labels=None) -> list[int]:
    if labels is not None:
        return [int(c) for c in labels]
    present = set(int(v) for v in true) | set(int(v) for v in pred)
    known = sorted(c for c in present if c != UNKNOWN)
    if UNKNOWN in present:
        known.append(UNKNOWN)
    return known


def _check_pair(true, pred):
    t = np.asarray(true, dtype=np.int64).ravel()
    p = np.asarray(pred, dtype=np.int64).ravel()
    if t.size == 0:
        raise DataError("cannot score an empty label vector")
    if t.size != p.size:
        raise DataError(f"length mismatch: {t.size} truths vs {p.size} predictions")
    return t, p


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    weighted_f1: float
    per_class: dict[int, ClassMetrics]
    per_tissue: dict[int, float] = field(default_factory=dict)
    n: int = 0


def metrics(true, pred, tissues=None, labels=None) -> MetricsReport:
    """Accuracy, per-class precision/recall/F1 and the two F1 averages.

    Macro F1 averages classes with support > 0 only; weighted F1 weights by
    support. A class with precision + recall = 0 gets F1 = 0. When a tissue
    vector is given, the per-tissue table holds each tissue's weighted F1.
    """
    t, p = _check_pair(true, pred)
    order = _label_order(t, p, labels)
    per_class: dict[int, ClassMetrics] = {}
    for c in order:
        tp = int(np.sum((t == c) & (p == c)))
        fp = int(np.sum((t != c) & (p == c)))
        fn = int(np.sum((t == c) & (p != c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[c] = ClassMetrics(precision, recall, f1, tp + fn)
    scored = [c for c in order if per_class[c].support > 0]
    macro = float(np.mean([per_class[c].f1 for c in scored])) if scored else 0.0
    total = sum(per_class[c].support for c in scored)
    weighted = sum(per_class[c].f1 * per_class[c].support for c in scored) / total
    report = MetricsReport(float(np.mean(t == p)), macro, float(weighted),
                           per_class, n=int(t.size))
    if tissues is not None:
        tis = np.asarray(tissues, dtype=np.int64).ravel()
        if tis.size != t.size:
            raise DataError("tissue vector length does not match labels")
        for tv in sorted(set(int(v) for v in tis)):
            rows = tis == tv
            report.per_tissue[tv] = metrics(t[rows], p[rows]).weighted_f1
    return report


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K) int64, rows true, columns predicted
    labels: list[int]
    normalized: np.ndarray | None = None

    def row_normalized(self) -> np.ndarray:
        sums = self.counts.sum(axis=1, keepdims=True)
        out = np.zeros(self.counts.shape, dtype=np.float64)
        np.divide(self.counts, sums, out=out, where=sums > 0)
        return out


def confusion(true, pred, normalize_rows: bool = False, labels=None) -> ConfusionMatrix:
    """Count matrix in vocabulary label order; rows are truth.

    The row-normalized view's diagonal is exactly per-class recall.
    """
    t, p = _check_pair(true, pred)
    order = _label_order(t, p, labels)
    index = {c: i for i, c in enumerate(order)}
    counts = np.zeros((len(order), len(order)), dtype=np.int64)
    for tv, pv in zip(t, p):
        if int(tv) not in index or int(pv) not in index:
            raise DataError(f"label {tv if int(tv) not in index else pv} "
                            f"is outside the declared label order")
        counts[index[int(tv)], index[int(pv)]] += 1
    cm = ConfusionMatrix(counts, order)
    if normalize_rows:
        cm.normalized = cm.row_normalized()
    return cm


# ---------------------------------------------------------------------------
# open-set baselines

def threshold_baseline(probs: np.ndarray, cutoff: float, labels=None) -> np.ndarray:
    """Cutoff rejection: UNKNOWN iff the top class probability < cutoff."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    cols = np.argmax(p, axis=1)
    top = p[np.arange(p.shape[0]), cols]
    if labels is None:
        out = cols.astype(np.int64)
    else:
        out = np.asarray([labels[c] for c in cols], dtype=np.int64)
    out[top < cutoff] = UNKNOWN
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class DocHead:
    """1-vs-rest sigmoid layer for open-set rejection."""

    weight: np.ndarray  # (K, d)
    bias: np.ndarray  # (K,)
    labels: list[int]
    trained: bool = False


def train_doc(embeddings: np.ndarray, targets, labels=None, epochs: int = 200,
              lr: float = 0.05) -> DocHead:
    """Fit one independent sigmoid per class with binary cross-entropy.

    Full-batch Adam from zero init; the per-class problem is convex for a
    linear head, so no random restarts are needed.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    t = np.asarray(targets, dtype=np.int64).ravel()
    if x.shape[0] != t.size:
        raise DataError("embedding and target counts differ")
    order = _label_order(t, t, labels)
    if UNKNOWN in order:
        raise DataError("DOC training targets cannot contain the unknown sentinel")
    head = DocHead(np.zeros((len(order), x.shape[1])), np.zeros(len(order)), order)
    y = np.zeros((t.size, len(order)))
    for i, c in enumerate(order):
        y[:, i] = t == c
    params = {"w": head.weight, "b": head.bias}
    state = training.OptimizerState.for_params(params)
    n = x.shape[0]
    for _ in range(epochs):
        s = _sigmoid(x @ head.weight.T + head.bias)
        dz = (s - y) / n
        grads = {"w": dz.T @ x, "b": dz.sum(axis=0)}
        training.adam_step(state, params, grads, lr)
    head.trained = True
    return head


def doc_baseline(head: DocHead, embeddings: np.ndarray, cutoffs=0.5) -> np.ndarray:
    """UNKNOWN iff every class sigmoid falls below its cutoff, else argmax."""
    if not head.trained:
        raise CalibrationError("DOC head is untrained; fit it before scoring")
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    s = _sigmoid(x @ head.weight.T + head.bias)
    cut = np.broadcast_to(np.asarray(cutoffs, dtype=np.float64), (len(head.labels),))
    cols = np.argmax(s, axis=1)
    out = np.asarray([head.labels[c] for c in cols], dtype=np.int64)
    out[(s < cut).all(axis=1)] = UNKNOWN
    return out


@dataclass
class OpenSetReport:
    novel_accuracy: float
    known_accuracy: float
    per_class: dict[int, float]


def novel_detection_accuracy(verdicts, is_novel, true_labels) -> OpenSetReport:
    """Score verdicts against ground truth novelty flags.

    novel_accuracy is the fraction of truly novel cells flagged novel;
    known cells count as correct only when kept known AND labeled right.
    """
    mask = np.asarray(is_novel, dtype=bool).ravel()
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    if len(verdicts) != mask.size or mask.size != t.size:
        raise DataError("verdicts, novelty flags and labels must align")
    if not mask.any():
        raise DataError("ground truth contains no novel cells")
    flagged = np.asarray([v.verdict == "novel" for v in verdicts], dtype=bool)
    predicted = np.asarray([v.label for v in verdicts], dtype=np.int64)
    novel_acc = float(flagged[mask].mean())
    known = ~mask
    correct = known & ~flagged & (predicted == t)
    known_acc = float(correct[known].mean()) if known.any() else 0.0
    per_class: dict[int, float] = {}
    for c in sorted(set(int(v) for v in t[known])):
        rows = known & (t == c)
        per_class[c] = float(correct[rows].mean())
    return OpenSetReport(novel_acc, known_acc, per_class)


# ---------------------------------------------------------------------------
# incremental-sample sweep

@dataclass
class IncrementalSweepConfig:
    sample_counts: list[int] = field(default_factory=lambda: [10, 20, 30, 40, 50])
    repeats: int = 1
    seed: int = 0

    def validate(self) -> None:
        if not self.sample_counts:
            raise DataError("sample_counts cannot be empty")
        if any(n <= 0 for n in self.sample_counts):
            raise DataError("sample counts must be positive")
        if any(b <= a for a, b in zip(self.sample_counts, self.sample_counts[1:])):
            raise DataError("sample counts must be strictly ascending")
        if self.repeats < 1:
            raise DataError("repeats must be at least 1")


@dataclass(frozen=True)
class SweepRow:
    n: int
    novel_accuracy: float
    known_accuracy: float
    convergence_epoch: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    baseline_known_accuracy: float
    snapshot_digest: str
    reset_digests: list[str]
    base_digest: str
    base_digests_after: list[str]


def convergence_epoch(report: training.TrainReport, slack: float = 0.05) -> int:
    """First epoch whose validation loss is within slack of the eventual minimum."""
    losses = report.val_losses()
    if not losses:
        raise DataError("training report has no epochs")
    floor = min(losses) * (1.0 + slack)
    for rec in report.records:
        if rec.val_loss <= floor:
            return rec.epoch
    return report.records[-1].epoch


def _plugin_accuracy(system: SystemState, tissue: int, x_raw, y,
                     already_normalized: bool = False) -> float:
    plugin = system.registry.latest_for_tissue(tissue)
    if hasattr(x_raw, "to_dense"):
        x = x_raw.to_dense() if already_normalized else normalize(x_raw).to_dense()
    else:
        x = np.asarray(x_raw)
    emb = encoder.encode_matrix(system.base, x.astype(system.base.dtype), plugin)
    labels, _, _ = adapters.predict_batch(plugin.head, emb)
    return float(np.mean(labels == np.asarray(y, dtype=np.int64)))


def incremental_sweep(system: SystemState, tissue: int, novel_pool: LoadedData,
                      known_eval, novel_eval, cfg: IncrementalSweepConfig,
                      train_cfg: training.TrainConfig,
                      already_normalized: bool = False) -> SweepResult:
    """Retrain with n novel cells for each n, from a verified clean snapshot.

    novel_pool holds raw labeled cells of one new class; known_eval and
    novel_eval are (matrix, labels) pairs of raw held-out cells (set
    already_normalized when they went through normalize() upstream; plain
    ndarrays are always taken as ready). Every run clones the snapshot and
    the clone's digest is recorded so callers can prove no contamination
    leaked between runs. Accuracies are means over repeats; the base encoder
    digest is captured after every run because it must never move.
    """
    cfg.validate()
    pool_labels = set(int(v) for v in novel_pool.labels())
    if len(pool_labels) != 1 or UNKNOWN in pool_labels:
        raise DataError("novel pool must carry exactly one labeled class")
    if novel_pool.matrix.n_cells < max(cfg.sample_counts):
        raise DataError(
            f"novel pool has {novel_pool.matrix.n_cells} cells, fewer than the "
            f"largest sample count {max(cfg.sample_counts)}")
    snapshot = system.clone()
    snapshot_digest = snapshot.digest()
    base_digest = snapshot.base.digest()
    kx, ky = known_eval
    baseline_known = _plugin_accuracy(snapshot, tissue, kx, ky, already_normalized)

    nx, ny = novel_eval
    rows: list[SweepRow] = []
    reset_digests: list[str] = []
    base_after: list[str] = []
    for n in cfg.sample_counts:
        novel_accs, known_accs, conv = [], [], []
        for r in range(cfg.repeats):
            work = snapshot.clone()
            reset_digests.append(work.digest())
            rng = rng_for(cfg.seed, f"sweep:n{n}:r{r}")
            idx = np.sort(rng.choice(novel_pool.matrix.n_cells, size=n, replace=False))
            sub = subset_loaded(novel_pool, idx)
            if already_normalized:
                norm = sub
            else:
                norm = LoadedData(normalize(sub.matrix), sub.metadata, sub.vocab)
            _, report = training.incremental_train(
                work.base, work.registry, work.store, work.datasets,
                work.vocab, norm, tissue, train_cfg)
            novel_accs.append(_plugin_accuracy(work, tissue, nx, ny, already_normalized))
            known_accs.append(_plugin_accuracy(work, tissue, kx, ky, already_normalized))
            conv.append(convergence_epoch(report))
            base_after.append(work.base.digest())
        rows.append(SweepRow(n, float(np.mean(novel_accs)),
                             float(np.mean(known_accs)), float(np.mean(conv))))
    return SweepResult(rows, baseline_known, snapshot_digest, reset_digests,
                       base_digest, base_after)


def write_sweep(result: SweepResult, path) -> None:
    with open(path, "w") as fh:
        fh.write("n,novel_accuracy,known_accuracy,convergence_epoch\n")
        for row in result.rows:
            fh.write(f"{row.n},{row.novel_accuracy!r},{row.known_accuracy!r},"
                     f"{row.convergence_epoch!r}\n")
        fh.write(f"# baseline_known={result.baseline_known_accuracy!r}\n")


# ---------------------------------------------------------------------------
# report rendering and export

def format_metrics_table(report: MetricsReport, vocab=None) -> str:
    """Fixed-width human-readable table; one row per class, averages last."""
    name = (lambda c: vocab.cell_type_name(c)) if vocab else str
    lines = [f"{'class':<20}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>9}"]
    for c, m in report.per_class.items():
        lines.append(f"{name(c):<20}{m.precision:>10.4f}{m.recall:>10.4f}"
                     f"{m.f1:>10.4f}{m.support:>9d}")
    lines.append(f"{'accuracy':<20}{report.accuracy:>39.4f}")
    lines.append(f"{'macro f1':<20}{report.macro_f1:>39.4f}")
    lines.append(f"{'weighted f1':<20}{report.weighted_f1:>39.4f}")
    for t, wf1 in sorted(report.per_tissue.items()):
        tn = vocab.tissue_name(t) if vocab else str(t)
        lines.append(f"{'tissue ' + tn:<20}{wf1:>39.4f}")
    return "\n".join(lines) + "\n"


def metrics_records(report: MetricsReport, vocab=None) -> list[str]:
    """Line-delimited metric records: kind,key,value."""
    name = (lambda c: vocab.cell_type_name(c)) if vocab else str
    out = [f"accuracy,overall,{report.accuracy!r}",
           f"macro_f1,overall,{report.macro_f1!r}",
           f"weighted_f1,overall,{report.weighted_f1!r}"]
    for c, m in report.per_class.items():
        key = name(c)
        out.append(f"precision,{key},{m.precision!r}")
        out.append(f"recall,{key},{m.recall!r}")
        out.append(f"f1,{key},{m.f1!r}")
        out.append(f"support,{key},{m.support}")
    for t, wf1 in sorted(report.per_tissue.items()):
        tn = vocab.tissue_name(t) if vocab else str(t)
        out.append(f"weighted_f1,tissue:{tn},{wf1!r}")
    return out


def write_metrics_records(report: MetricsReport, path, vocab=None) -> None:
    with open(path, "w") as fh:
        fh.write("metric,key,value\n")
        for line in metrics_records(report, vocab):
            fh.write(line + "\n")


def format_confusion(cm: ConfusionMatrix, vocab=None) -> str:
    name = (lambda c: vocab.cell_type_name(c)) if vocab else str
    labels = [name(c) for c in cm.labels]
    width = max(12, max(len(s) for s in labels) + 2)
    header = " " * width + "".join(f"{s:>{width}}" for s in labels)
    lines = [header]
    for i, s in enumerate(labels):
        lines.append(f"{s:>{width}}" + "".join(
            f"{int(v):>{width}d}" for v in cm.counts[i]))
    return "\n".join(lines) + "\n"


def export_embeddings(embeddings: np.ndarray, labels, cell_ids, path) -> None:
    """cell_id, label, then one column per embedding dimension."""
    e = np.atleast_2d(np.asarray(embeddings))
    if not (e.shape[0] == len(labels) == len(cell_ids)):
        raise DataError("embeddings, labels and cell ids must align")
    d = e.shape[1]
    with open(path, "w") as fh:
        fh.write("cell_id,label," + ",".join(f"e{j}" for j in range(d)) + "\n")
        for i in range(e.shape[0]):
            vals = ",".join(repr(float(v)) for v in e[i])
            fh.write(f"{cell_ids[i]},{labels[i]},{vals}\n")


def read_embeddings(path):
    """Inverse of export_embeddings: (cell_ids, labels, values)."""
    cell_ids, labels, rows = [], [], []
    with open(path) as fh:
        next(fh)
        for ln in fh:
            parts = ln.rstrip("\n").split(",")
            cell_ids.append(parts[0])
            labels.append(parts[1])
            rows.append([float(v) for v in parts[2:]])
    return cell_ids, labels, np.asarray(rows)
