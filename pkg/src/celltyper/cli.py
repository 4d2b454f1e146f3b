"""Command line workflow around the library.

The workspace directory is the unit of state. Commands build it up in
order: synth (or your own data) -> ingest -> pretrain -> train-plugin per
tissue -> train-assignment -> build-memory, after which annotate, extend,
detect-novel, eval and export-embeddings operate on the stored artifacts.

Layout under the workspace:
    data/       raw expression matrix + metadata sidecar
    processed/  normalized matrix, split.json, vocab.json
    models/     encoder.bin and plugin-*.bin (every trained version)
    memory/     store/ (vector indexes) and pools/ (per-tissue datasets)
    reports/    delimited outputs, figures and answer transcripts

Exit codes: 0 ok, 2 config or input validation, 3 runtime failure,
4 oracle endpoint failure.
"""

from __future__ import annotations

import json
import os

import click
import numpy as np

from . import adapters, detection, encoder, evaluation, figures, memory, planner, training
from .config import CliConfig, load_config
from .data import (
    UNKNOWN,
    DatasetSplit,
    LabelVocabulary,
    LoadedData,
    load_matrix,
    normalize,
    filter_qc,
    stratified_split,
    subset_loaded,
    synthesize,
    write_matrix,
)
from .errors import CellTyperError, ConfigError, DataError, OracleError
from .util import child_seed


# ---------------------------------------------------------------------------
# shared options and config plumbing

def _common(f):
    f = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                     help="Override one config key, e.g. --set train.max_epochs=50.")(f)
    f = click.option("--seed", type=int, default=None,
                     help="Root seed; overrides the config file.")(f)
    f = click.option("--workspace", default=None, metavar="DIR",
                     help="Workspace directory (default ./workspace).")(f)
    f = click.option("--config", "config_path", default=None, metavar="FILE",
                     help="YAML config file.")(f)
    return f


def _cfg(config_path, workspace, seed, sets) -> CliConfig:
    overrides = {}
    for item in sets:
        key, eq, value = item.partition("=")
        if not eq or not key:
            raise ConfigError(f"--set needs KEY=VALUE, got '{item}'")
        overrides[key.strip()] = value
    if workspace is not None:
        overrides["paths.workspace"] = workspace
    if seed is not None:
        overrides["seed"] = seed
    return load_config(config_path, overrides)


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise ConfigError(f"missing {path}; {hint}")
    return path


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# artifact loading

def _load_vocab(cfg: CliConfig) -> LabelVocabulary:
    path = _require(os.path.join(cfg.path("processed"), "vocab.json"),
                    "run `celltyper ingest` first")
    with open(path) as fh:
        return LabelVocabulary.from_dict(json.load(fh))


def _load_processed(cfg: CliConfig):
    """(LoadedData, DatasetSplit, vocab) for the ingested corpus."""
    vocab = _load_vocab(cfg)
    processed = cfg.path("processed")
    mat = _require(os.path.join(processed, "normalized.csv"),
                   "run `celltyper ingest` first")
    data = load_matrix(mat, vocab=vocab, extend_vocab=False)
    with open(_require(os.path.join(processed, "split.json"),
                       "run `celltyper ingest` first")) as fh:
        split = DatasetSplit.from_dict(json.load(fh))
    return data, split, vocab


def _load_base(cfg: CliConfig) -> encoder.EncoderParams:
    path = _require(os.path.join(cfg.path("models"), "encoder.bin"),
                    "run `celltyper pretrain` first")
    return encoder.load_encoder(path)


def _plugin_filename(plugin: adapters.MoeLoraPlugin) -> str:
    if plugin.kind == "tissue-assignment":
        return f"plugin-assignment-v{plugin.version}.bin"
    return f"plugin-tissue{plugin.target_tissue}-v{plugin.version}.bin"


def _load_registry(cfg: CliConfig, base: encoder.EncoderParams) -> adapters.PluginRegistry:
    """Rebuild the registry from every plugin file, oldest version first."""
    models = cfg.path("models")
    registry = adapters.PluginRegistry()
    if not os.path.isdir(models):
        return registry
    plugins = []
    for name in sorted(os.listdir(models)):
        if name.startswith("plugin-") and name.endswith(".bin"):
            plugins.append(adapters.load_plugin(os.path.join(models, name)))
    plugins.sort(key=lambda p: (p.kind, -1 if p.target_tissue is None else p.target_tissue,
                                p.version))
    shapes = base.config.adapted_layer_shapes()
    for plugin in plugins:
        adapters.check_compatible(plugin, shapes, base.config.embedding_dim)
        registry.register_plugin(plugin)
    return registry


def _load_system(cfg: CliConfig) -> planner.SystemState:
    base = _load_base(cfg)
    vocab = _load_vocab(cfg)
    registry = _load_registry(cfg, base)
    if not registry.tissues():
        raise ConfigError("no tissue plugins found; run `celltyper train-plugin` first")
    memory_dir = cfg.path("memory")
    store_dir = _require(os.path.join(memory_dir, "store"),
                         "run `celltyper build-memory` first")
    store = memory.load_store(store_dir)
    pools_dir = _require(os.path.join(memory_dir, "pools"),
                         "run `celltyper build-memory` first")
    datasets = memory.load_datasets(pools_dir, vocab)
    return planner.SystemState(base, registry, store, datasets, vocab)


def _persist_system(cfg: CliConfig, system: planner.SystemState) -> None:
    """Write back the mutable parts after an extension run."""
    processed = _ensure_dir(cfg.path("processed"))
    with open(os.path.join(processed, "vocab.json"), "w") as fh:
        json.dump(system.vocab.to_dict(), fh, indent=2, sort_keys=True)
    models = _ensure_dir(cfg.path("models"))
    for t in system.registry.tissues():
        plugin = system.registry.latest_for_tissue(t)
        adapters.save_plugin(plugin, os.path.join(models, _plugin_filename(plugin)))
    memory_dir = _ensure_dir(cfg.path("memory"))
    memory.save_store(system.store, os.path.join(memory_dir, "store"))
    memory.save_datasets(system.datasets, os.path.join(memory_dir, "pools"))


def _tissue_index(vocab: LabelVocabulary, value: str) -> int:
    """Accept a tissue by name or by integer index."""
    value = value.strip()
    try:
        t = vocab.tissue_index(value)
    except DataError:
        t = UNKNOWN
    if t >= 0:
        return t
    try:
        t = int(value)
    except ValueError:
        raise DataError(f"unknown tissue '{value}'") from None
    if not 0 <= t < len(vocab.tissues):
        raise DataError(f"tissue index {t} out of range 0..{len(vocab.tissues) - 1}")
    return t


def _parse_answers(pairs) -> dict:
    answers = {}
    for item in pairs:
        key, eq, value = item.partition("=")
        if not eq or not key:
            raise ConfigError(f"--answer needs KEY=VALUE, got '{item}'")
        answers[key.strip()] = value
    return answers


# ---------------------------------------------------------------------------
# model fitting shared by commands and the sweep

def _tissue_rows(data: LoadedData, rows: np.ndarray, tissue: int) -> np.ndarray:
    tis = data.tissues()
    return rows[tis[rows] == tissue]


def _fit_plugin(cfg: CliConfig, base, data: LoadedData, train_rows, val_rows,
                kind: str, tissue: int | None, label: str):
    """Init and train one plugin on dense normalized rows."""
    a = cfg.sections["adapters"]
    plugin = adapters.init_plugin(
        base.config.adapted_layer_shapes(), base.config.embedding_dim,
        kind, target_tissue=tissue, n_experts=a["n_experts"], rank=a["rank"],
        alpha=a["alpha"], head_capacity=data.vocab.reserved_capacity,
        seed=cfg.seed, dtype=base.dtype)
    x = data.matrix.to_dense().astype(base.dtype)
    targets = data.tissues() if kind == "tissue-assignment" else data.labels()
    tcfg = cfg.train_config(label)
    fit = training.train_tissue_assignment if kind == "tissue-assignment" else training.train_plugin
    return fit(base, plugin, (x[train_rows], targets[train_rows]),
               (x[val_rows], targets[val_rows]), tcfg)


def _build_memory_parts(cfg: CliConfig, base, registry, data: LoadedData,
                        split: DatasetSplit):
    """Vector store over train+val reference cells, plus per-tissue pools."""
    idx = cfg.sections["index"]
    x = data.matrix.to_dense().astype(base.dtype)
    labels = data.labels()
    pools = memory.DatasetStore()
    records_g: list[memory.EmbeddingRecord] = []
    records_s: list[memory.EmbeddingRecord] = []
    for t in sorted(set(int(v) for v in data.tissues())):
        tr = _tissue_rows(data, split.train, t)
        va = _tissue_rows(data, split.val, t)
        rows = np.sort(np.concatenate([tr, va]))
        pool = subset_loaded(data, rows)
        pos = {int(r): i for i, r in enumerate(rows)}
        pools.add(t, pool, [pos[int(r)] for r in tr], [pos[int(r)] for r in va],
                  dataset_id=f"t{t}-d0")
        plugin = registry.latest_for_tissue(t)
        f_g = encoder.encode_matrix(base, x[rows])
        f_s = encoder.encode_matrix(base, x[rows], plugin)
        for i, r in enumerate(rows):
            cid = data.matrix.cell_ids[int(r)]
            lab = int(labels[int(r)])
            records_g.append(memory.EmbeddingRecord(f_g[i], lab, t, "standard", cid))
            records_s.append(memory.EmbeddingRecord(f_s[i], lab, t, "lora-enhanced", cid))
    store = memory.VectorStore(
        memory.build_index(records_g, nlist=idx["nlist"], metric=idx["metric"],
                           nprobe=idx["nprobe"], seed=child_seed(cfg.seed, "index:g"),
                           source="standard"),
        memory.build_index(records_s, nlist=idx["nlist"], metric=idx["metric"],
                           nprobe=idx["nprobe"], seed=child_seed(cfg.seed, "index:s"),
                           source="lora-enhanced"),
    )
    return store, pools


def _fit_system(cfg: CliConfig, base, data: LoadedData, split: DatasetSplit,
                label_prefix: str = "") -> planner.SystemState:
    """In-memory end-to-end fit (plugins, assignment, memory) for the sweep."""
    registry = adapters.PluginRegistry()
    for t in sorted(set(int(v) for v in data.tissues())):
        plugin, _ = _fit_plugin(cfg, base, data,
                                _tissue_rows(data, split.train, t),
                                _tissue_rows(data, split.val, t),
                                "tissue-specific", t, f"{label_prefix}tissue-{t}")
        registry.register_plugin(plugin)
    assignment, _ = _fit_plugin(cfg, base, data, split.train, split.val,
                                "tissue-assignment", None, f"{label_prefix}assignment")
    registry.register_plugin(assignment)
    store, pools = _build_memory_parts(cfg, base, registry, data, split)
    return planner.SystemState(base, registry, store, pools, data.vocab)


# ---------------------------------------------------------------------------
# commands

@click.group(name="celltyper")
def cli():
    """Cell type annotation with a frozen encoder and per-tissue plugins."""


@cli.command()
@_common
def synth(config_path, workspace, seed, sets):
    """Generate a synthetic labeled corpus into <workspace>/data."""
    cfg = _cfg(config_path, workspace, seed, sets)
    data = synthesize(cfg.synthesis_config())
    out = os.path.join(_ensure_dir(cfg.path("data")), "corpus.csv")
    write_matrix(data, out)
    click.echo(f"wrote {data.matrix.n_cells} cells x {data.matrix.n_genes} genes "
               f"({len(data.vocab.tissues)} tissues, {len(data.vocab.cell_types)} "
               f"cell types) to {out}")


@cli.command()
@click.option("--data", "data_path", default=None, metavar="FILE",
              help="Raw matrix; default <workspace>/data/corpus.csv.")
@click.option("--fmt", type=click.Choice(["dense-csv", "sparse-mtx"]), default=None,
              help="Input format; default inferred from the extension.")
@_common
def ingest(data_path, fmt, config_path, workspace, seed, sets):
    """QC-filter, normalize and split raw data into <workspace>/processed."""
    cfg = _cfg(config_path, workspace, seed, sets)
    if data_path is None:
        data_path = os.path.join(cfg.path("data"), "corpus.csv")
    _require(data_path, "pass --data or run `celltyper synth` first")
    raw = load_matrix(data_path, fmt=fmt)
    pre = cfg.sections["preprocess"]
    matrix, metadata = filter_qc(raw.matrix, raw.metadata,
                                 pre["min_genes_per_cell"], pre["min_cells_per_gene"])
    norm = normalize(matrix, pre["target_sum"], pre["log1p"])
    split = stratified_split(metadata, cfg.split_ratios,
                             seed=child_seed(cfg.seed, "split"), vocab=raw.vocab)
    processed = _ensure_dir(cfg.path("processed"))
    write_matrix(LoadedData(norm, metadata, raw.vocab),
                 os.path.join(processed, "normalized.csv"))
    with open(os.path.join(processed, "split.json"), "w") as fh:
        json.dump(split.to_dict(), fh)
    with open(os.path.join(processed, "vocab.json"), "w") as fh:
        json.dump(raw.vocab.to_dict(), fh, indent=2, sort_keys=True)
    click.echo(f"kept {norm.n_cells} of {raw.matrix.n_cells} cells, "
               f"{norm.n_genes} of {raw.matrix.n_genes} genes")
    click.echo(f"split train={split.train.size} val={split.val.size} "
               f"test={split.test.size}")


@cli.command()
@_common
def pretrain(config_path, workspace, seed, sets):
    """Self-supervised encoder pretraining on the train rows, then freeze."""
    cfg = _cfg(config_path, workspace, seed, sets)
    data, split, _ = _load_processed(cfg)
    x = data.matrix.to_dense()[split.train]
    base = encoder.init_encoder(cfg.encoder_config(data.matrix.n_genes), seed=cfg.seed)
    base, losses = encoder.pretrain_ssl(base, x.astype(base.dtype), cfg.ssl_config())
    base.frozen = True
    models = _ensure_dir(cfg.path("models"))
    encoder.save_encoder(base, os.path.join(models, "encoder.bin"))
    reports = _ensure_dir(cfg.path("reports"))
    with open(os.path.join(reports, "ssl_loss.csv"), "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(losses, start=1):
            fh.write(f"{i},{v!r}\n")
    figures.save_loss_curve(losses, os.path.join(reports, "ssl_loss.png"))
    last = f"{losses[-1]!r}" if losses else "n/a"
    click.echo(f"encoder frozen after {len(losses)} epochs (final loss {last}), "
               f"weights digest {base.digest()[:12]}")


@cli.command("train-plugin")
@click.option("--tissue", required=True, metavar="NAME|INDEX",
              help="Tissue whose plugin to train.")
@_common
def train_plugin_cmd(tissue, config_path, workspace, seed, sets):
    """Train (or version-bump) the annotation plugin for one tissue."""
    cfg = _cfg(config_path, workspace, seed, sets)
    data, split, vocab = _load_processed(cfg)
    base = _load_base(cfg)
    t = _tissue_index(vocab, tissue)
    tr = _tissue_rows(data, split.train, t)
    va = _tissue_rows(data, split.val, t)
    if tr.size == 0 or va.size == 0:
        raise DataError(f"tissue '{vocab.tissue_name(t)}' has no train/val cells")
    plugin, report = _fit_plugin(cfg, base, data, tr, va, "tissue-specific", t,
                                 f"tissue-{t}")
    models = _ensure_dir(cfg.path("models"))
    adapters.save_plugin(plugin, os.path.join(models, _plugin_filename(plugin)))
    reports = _ensure_dir(cfg.path("reports"))
    training.write_train_report(report, os.path.join(reports, f"train-tissue{t}.csv"))
    figures.save_training_curves(report, os.path.join(reports, f"train-tissue{t}.png"))
    final = report.records[-1]
    click.echo(f"{plugin.plugin_id} v{plugin.version}: val_acc={final.val_acc:.4f} "
               f"after {final.epoch} epochs ({report.stop_reason})")


@cli.command("train-assignment")
@_common
def train_assignment_cmd(config_path, workspace, seed, sets):
    """Train the tissue-assignment plugin on all tissues."""
    cfg = _cfg(config_path, workspace, seed, sets)
    data, split, _ = _load_processed(cfg)
    base = _load_base(cfg)
    plugin, report = _fit_plugin(cfg, base, data, split.train, split.val,
                                 "tissue-assignment", None, "assignment")
    models = _ensure_dir(cfg.path("models"))
    adapters.save_plugin(plugin, os.path.join(models, _plugin_filename(plugin)))
    reports = _ensure_dir(cfg.path("reports"))
    training.write_train_report(report, os.path.join(reports, "train-assignment.csv"))
    figures.save_training_curves(report, os.path.join(reports, "train-assignment.png"))
    final = report.records[-1]
    click.echo(f"{plugin.plugin_id} v{plugin.version}: val_acc={final.val_acc:.4f} "
               f"after {final.epoch} epochs ({report.stop_reason})")


@cli.command("build-memory")
@_common
def build_memory_cmd(config_path, workspace, seed, sets):
    """Index reference embeddings (standard + plugin-enhanced) and pools."""
    cfg = _cfg(config_path, workspace, seed, sets)
    data, split, vocab = _load_processed(cfg)
    base = _load_base(cfg)
    registry = _load_registry(cfg, base)
    for t in sorted(set(int(v) for v in data.tissues())):
        if t not in registry.tissues():
            raise ConfigError(
                f"no plugin for tissue '{vocab.tissue_name(t)}'; run "
                f"`celltyper train-plugin --tissue {vocab.tissue_name(t)}` first")
    store, pools = _build_memory_parts(cfg, base, registry, data, split)
    memory_dir = _ensure_dir(cfg.path("memory"))
    memory.save_store(store, os.path.join(memory_dir, "store"))
    memory.save_datasets(pools, os.path.join(memory_dir, "pools"))
    click.echo(f"indexed {store.g.size} reference cells per sub-store "
               f"(nlist g={store.g.nlist} s={store.s.nlist}) across "
               f"{len(pools.tissues())} tissue pools")


def _write_run_artifacts(cfg: CliConfig, name: str, result) -> None:
    reports = _ensure_dir(cfg.path("reports"))
    with open(os.path.join(reports, f"{name}-answer.txt"), "w") as fh:
        fh.write(result.answer)
    result.history.write(os.path.join(reports, f"{name}-history.jsonl"))
    if result.verdicts:
        detection.write_verdicts(result.verdicts,
                                 os.path.join(reports, f"{name}-verdicts.csv"))
        counts = {}
        for v in result.verdicts:
            counts[v.label_name] = counts.get(v.label_name, 0) + 1
        figures.save_count_bars(counts, os.path.join(reports, f"{name}-labels.png"),
                                title="assigned labels")


@cli.command()
@click.option("--query", required=True, help="Natural-language request.")
@click.option("--data", "data_path", required=True, metavar="FILE",
              help="Raw (unnormalized) query cells; counts are normalized in here.")
@click.option("--answer", "answers", multiple=True, metavar="KEY=VALUE",
              help="Pre-supplied answer to a clarifying question, repeatable.")
@click.option("--interactive", is_flag=True,
              help="Ask clarifying questions on stdin instead of failing.")
@click.option("--tissue", default=None, metavar="NAME|INDEX",
              help="Skip tissue assignment and use this tissue.")
@_common
def annotate(query, data_path, answers, interactive, tissue, config_path,
             workspace, seed, sets):
    """Run one annotation query through the staged plan."""
    cfg = _cfg(config_path, workspace, seed, sets)
    system = _load_system(cfg)
    qdata = load_matrix(_require(data_path, "pass --data with the query cells"),
                        vocab=system.vocab, extend_vocab=False)
    env = planner.ExecutionEnv(answers=_parse_answers(answers), interactive=interactive)
    t = _tissue_index(system.vocab, tissue) if tissue is not None else None
    result = planner.run_query(
        system, query, qdata, env=env, detection_params=cfg.detection_params(),
        oracle=cfg.oracle_config(), train=cfg.train_config("annotate"),
        tissue=t, seed=cfg.seed)
    _write_run_artifacts(cfg, "annotate", result)
    if result.report.get("intent") == "extend" and result.report.get("consent"):
        _persist_system(cfg, system)
    click.echo(result.answer, nl=False)


@cli.command()
@click.option("--tissue", default=None, metavar="NAME|INDEX",
              help="Target tissue; default taken from the metadata sidecar.")
@click.option("--data", "data_path", required=True, metavar="FILE",
              help="Raw labeled cells of the new type(s), with metadata sidecar.")
@click.option("--answer", "answers", multiple=True, metavar="KEY=VALUE",
              help="Pre-supplied answer, e.g. --answer consent=yes.")
@click.option("--interactive", is_flag=True,
              help="Ask for consent on stdin instead of failing.")
@_common
def extend(tissue, data_path, answers, interactive, config_path, workspace,
           seed, sets):
    """Add labeled cells of a new type: retrain the plugin, update memory."""
    cfg = _cfg(config_path, workspace, seed, sets)
    system = _load_system(cfg)
    qdata = load_matrix(_require(data_path, "pass --data with the labeled cells"),
                        vocab=system.vocab, extend_vocab=True)
    env = planner.ExecutionEnv(answers=_parse_answers(answers), interactive=interactive)
    t = _tissue_index(system.vocab, tissue) if tissue is not None else None
    result = planner.run_query(
        system, "extend the atlas with these labeled cells", qdata, env=env,
        detection_params=cfg.detection_params(), oracle=cfg.oracle_config(),
        train=cfg.train_config("extend"), tissue=t, seed=cfg.seed)
    _write_run_artifacts(cfg, "extend", result)
    if result.report.get("consent"):
        _persist_system(cfg, system)
    click.echo(result.answer, nl=False)


@cli.command("detect-novel")
@click.option("--data", "data_path", required=True, metavar="FILE",
              help="Raw query cells to screen.")
@click.option("--tissue", default=None, metavar="NAME|INDEX",
              help="Tissue context; default from sidecar metadata, else the "
                   "assignment plugin.")
@_common
def detect_novel_cmd(data_path, tissue, config_path, workspace, seed, sets):
    """Screen cells for novel types without the full planning loop."""
    cfg = _cfg(config_path, workspace, seed, sets)
    system = _load_system(cfg)
    qdata = load_matrix(_require(data_path, "pass --data with the query cells"),
                        vocab=system.vocab, extend_vocab=False)
    x = normalize(qdata.matrix).to_dense().astype(system.base.dtype)
    if tissue is not None:
        t = _tissue_index(system.vocab, tissue)
    else:
        tis = set(int(v) for v in qdata.tissues() if v >= 0)
        if len(tis) == 1:
            t = tis.pop()
        else:
            t, _, _, _, _ = planner.assign_tissue(system, x)
    history = memory.HistoryLog()
    det = detection.build_detector(system.base, system.registry.latest_for_tissue(t),
                                   system.store, system.vocab,
                                   cfg.detection_params(), cfg.oracle_config(), history)
    verdicts = detection.detect_batch(det, x, list(qdata.matrix.cell_ids))
    reports = _ensure_dir(cfg.path("reports"))
    detection.write_verdicts(verdicts, os.path.join(reports, "detect-verdicts.csv"))
    history.write(os.path.join(reports, "detect-history.jsonl"))
    counts = {"known": 0, "novel": 0}
    for v in verdicts:
        counts["novel" if v.verdict == "novel" else "known"] += 1
    figures.save_count_bars(counts, os.path.join(reports, "detect-counts.png"),
                            title="novelty screen")
    click.echo(f"tissue={system.vocab.tissue_name(t)} known={counts['known']} "
               f"novel={counts['novel']} -> {os.path.join(reports, 'detect-verdicts.csv')}")


def _eval_predictions(system: planner.SystemState, data: LoadedData,
                      rows: np.ndarray):
    """Per-tissue plugin predictions plus assignment accuracy on given rows."""
    x = data.matrix.to_dense().astype(system.base.dtype)
    labels = data.labels()
    tissues = data.tissues()
    pred = np.full(rows.size, -2, dtype=np.int64)
    for t in sorted(set(int(v) for v in tissues[rows])):
        mask = tissues[rows] == t
        plugin = system.registry.latest_for_tissue(t)
        emb = encoder.encode_matrix(system.base, x[rows[mask]], plugin)
        got, _, _ = adapters.predict_batch(plugin.head, emb)
        pred[mask] = got
    assignment = system.registry.latest_assignment()
    emb = encoder.encode_matrix(system.base, x[rows], assignment)
    tpred, _, _ = adapters.predict_batch(assignment.head, emb)
    assignment_acc = float(np.mean(tpred == tissues[rows]))
    return labels[rows], pred, tissues[rows], assignment_acc


def _run_sweep(cfg: CliConfig, data: LoadedData, split: DatasetSplit,
               vocab: LabelVocabulary, base) -> evaluation.SweepResult:
    """Hold one class out, fit a reduced system, then add it back in steps."""
    hold_name = cfg.holdout_class or vocab.cell_types[-1]
    if not vocab.has_cell_type(hold_name):
        raise ConfigError(f"sweep.holdout_class '{hold_name}' is not in the vocabulary")
    hold = vocab.cell_type_index(hold_name)
    labels = data.labels()
    tissues = data.tissues()
    hold_tissues = set(int(v) for v in tissues[labels == hold])
    if len(hold_tissues) != 1:
        raise DataError(f"holdout class '{hold_name}' must live in exactly one tissue")
    t = hold_tissues.pop()

    kept = DatasetSplit(split.train[labels[split.train] != hold],
                        split.val[labels[split.val] != hold],
                        split.test[labels[split.test] != hold])
    reduced = _fit_system(cfg, base, data, kept, label_prefix="sweep:")

    pool_rows = split.train[labels[split.train] == hold]
    novel_pool = subset_loaded(data, pool_rows)
    known_rows = _tissue_rows(data, kept.test, t)
    novel_rows = np.concatenate([split.val[labels[split.val] == hold],
                                 split.test[labels[split.test] == hold]])
    known_eval = (data.matrix.subset_cells(known_rows), labels[known_rows])
    novel_eval = (data.matrix.subset_cells(novel_rows), labels[novel_rows])
    return evaluation.incremental_sweep(
        reduced, t, novel_pool, known_eval, novel_eval, cfg.sweep_config(),
        cfg.train_config("sweep:add"), already_normalized=True)


@cli.command("eval")
@click.option("--sweep", "do_sweep", is_flag=True,
              help="Also run the incremental novel-class sweep (retrains a "
                   "reduced system; slow).")
@_common
def eval_cmd(do_sweep, config_path, workspace, seed, sets):
    """Score the trained system on the held-out test split."""
    cfg = _cfg(config_path, workspace, seed, sets)
    data, split, vocab = _load_processed(cfg)
    system = _load_system(cfg)
    y_true, y_pred, y_tissue, assignment_acc = _eval_predictions(
        system, data, split.test)
    report = evaluation.metrics(y_true, y_pred, tissues=y_tissue)
    cm = evaluation.confusion(y_true, y_pred)
    reports = _ensure_dir(cfg.path("reports"))
    evaluation.write_metrics_records(report, os.path.join(reports, "metrics.csv"), vocab)
    with open(os.path.join(reports, "metrics.txt"), "w") as fh:
        fh.write(evaluation.format_metrics_table(report, vocab))
        fh.write(f"{'assignment acc':<20}{assignment_acc:>39.4f}\n")
    with open(os.path.join(reports, "confusion.txt"), "w") as fh:
        fh.write(evaluation.format_confusion(cm, vocab))
    figures.save_f1_bars(report, os.path.join(reports, "metrics.png"), vocab)
    click.echo(evaluation.format_metrics_table(report, vocab), nl=False)
    click.echo(f"{'assignment acc':<20}{assignment_acc:>39.4f}")
    if do_sweep:
        base = _load_base(cfg)
        result = _run_sweep(cfg, data, split, vocab, base)
        evaluation.write_sweep(result, os.path.join(reports, "sweep.csv"))
        figures.save_sweep_curves(result, os.path.join(reports, "sweep.png"))
        for row in result.rows:
            click.echo(f"sweep n={row.n}: novel={row.novel_accuracy:.4f} "
                       f"known={row.known_accuracy:.4f} "
                       f"convergence={row.convergence_epoch:.1f}")
        click.echo(f"sweep baseline known={result.baseline_known_accuracy:.4f}")


@cli.command("export-embeddings")
@click.option("--source", type=click.Choice(["g", "s"]), default="g",
              show_default=True,
              help="g = frozen encoder, s = per-tissue plugin enhanced.")
@click.option("--split", "which", type=click.Choice(["train", "val", "test", "all"]),
              default="all", show_default=True)
@click.option("--out", default=None, metavar="FILE",
              help="Default <workspace>/reports/embeddings-<source>.csv.")
@_common
def export_embeddings_cmd(source, which, out, config_path, workspace, seed, sets):
    """Dump reference-cell embeddings for external tools."""
    cfg = _cfg(config_path, workspace, seed, sets)
    data, split, vocab = _load_processed(cfg)
    base = _load_base(cfg)
    rows = {"train": split.train, "val": split.val, "test": split.test,
            "all": np.arange(data.matrix.n_cells, dtype=np.int64)}[which]
    x = data.matrix.to_dense().astype(base.dtype)
    if source == "g":
        emb = encoder.encode_matrix(base, x[rows])
    else:
        registry = _load_registry(cfg, base)
        tissues = data.tissues()
        emb = np.empty((rows.size, base.config.embedding_dim), dtype=base.dtype)
        for t in sorted(set(int(v) for v in tissues[rows])):
            mask = tissues[rows] == t
            plugin = registry.latest_for_tissue(t)
            emb[mask] = encoder.encode_matrix(base, x[rows[mask]], plugin)
    labels = data.labels()[rows]
    names = [vocab.cell_type_name(int(c)) for c in labels]
    ids = [data.matrix.cell_ids[int(r)] for r in rows]
    if out is None:
        out = os.path.join(_ensure_dir(cfg.path("reports")),
                           f"embeddings-{source}.csv")
    evaluation.export_embeddings(emb, names, ids, out)
    click.echo(f"wrote {rows.size} x {emb.shape[1]} embeddings to {out}")


def main(argv=None) -> int:
    """Entry point mapping library errors onto stable exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as e:
        return int(e.exit_code)
    except click.ClickException as e:
        e.show()
        return 2
    except click.Abort:
        click.echo("aborted", err=True)
        return 130
    except (ConfigError, DataError) as e:
        click.echo(f"error: {e}", err=True)
        return 2
    except OracleError as e:
        click.echo(f"oracle error: {e}", err=True)
        return 4
    except CellTyperError as e:
        click.echo(f"error: {e}", err=True)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
