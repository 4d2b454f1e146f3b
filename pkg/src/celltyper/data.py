"""Expression matrices, metadata, synthetic corpora and deterministic splits.

Two on-disk layouts are supported. Dense delimited text has a header row
`cell_id,<gene>,<gene>,...` and one row per cell. The sparse coordinate
layout has a `%`-prefixed banner line, a `n_cells n_genes n_entries` line,
and one `row col value` triple per nonzero with 1-based indices; gene names
live in a `<stem>.genes.txt` sidecar (one per line) because the coordinate
file itself carries none. Both layouts pair with a metadata sidecar
`<stem>.meta.csv` with header `cell_id,cell_type,tissue,batch`, where labels
are written as names. The reserved name "unknown" maps to the UNKNOWN
sentinel and can never be registered as a class.

Values are validated on load: no negatives, no NaN or infinity, unique gene
names and cell ids, metadata aligned row for row with the matrix. Errors
carry the offending location so bad files are fixable without a debugger.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import CapacityError, DataError
from .util import array_digest, rng_for

UNKNOWN = -1
UNKNOWN_NAME = "unknown"

# hard cap on distinct cell-type labels, mirrors the classification head
RESERVED_CAPACITY = 200


class LabelVocabulary:
    """Bidirectional name <-> index maps for cell types and tissues.

    Index order is first-appearance order, which keeps vocabularies
    deterministic for a given file or synthesis config.
    """

    def __init__(self, cell_types=None, tissues=None, reserved_capacity: int = RESERVED_CAPACITY):
        self.reserved_capacity = reserved_capacity
        self.cell_types: list[str] = []
        self.tissues: list[str] = []
        self._type_index: dict[str, int] = {}
        self._tissue_index: dict[str, int] = {}
        for name in cell_types or []:
            self.add_cell_type(name)
        for name in tissues or []:
            self.add_tissue(name)

    def add_cell_type(self, name: str) -> int:
        if name == UNKNOWN_NAME:
            raise DataError(f"'{UNKNOWN_NAME}' is reserved and cannot be a cell type name")
        if name in self._type_index:
            return self._type_index[name]
        if len(self.cell_types) >= self.reserved_capacity:
            raise CapacityError(
                f"cell type vocabulary is full ({self.reserved_capacity} labels), "
                f"cannot add '{name}'"
            )
        idx = len(self.cell_types)
        self.cell_types.append(name)
        self._type_index[name] = idx
        return idx

    def add_tissue(self, name: str) -> int:
        if name in self._tissue_index:
            return self._tissue_index[name]
        idx = len(self.tissues)
        self.tissues.append(name)
        self._tissue_index[name] = idx
        return idx

    def cell_type_index(self, name: str) -> int:
        if name == UNKNOWN_NAME:
            return UNKNOWN
        if name not in self._type_index:
            raise DataError(f"unknown cell type name '{name}'")
        return self._type_index[name]

    def tissue_index(self, name: str) -> int:
        if name == UNKNOWN_NAME:
            return UNKNOWN
        if name not in self._tissue_index:
            raise DataError(f"unknown tissue name '{name}'")
        return self._tissue_index[name]

    def cell_type_name(self, idx: int) -> str:
        if idx == UNKNOWN:
            return UNKNOWN_NAME
        return self.cell_types[idx]

    def tissue_name(self, idx: int) -> str:
        if idx == UNKNOWN:
            return UNKNOWN_NAME
        return self.tissues[idx]

    def has_cell_type(self, name: str) -> bool:
        return name in self._type_index

    def to_dict(self) -> dict:
        return {
            "cell_types": list(self.cell_types),
            "tissues": list(self.tissues),
            "reserved_capacity": self.reserved_capacity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelVocabulary":
        return cls(d["cell_types"], d["tissues"], d.get("reserved_capacity", RESERVED_CAPACITY))

    def copy(self) -> "LabelVocabulary":
        return LabelVocabulary.from_dict(self.to_dict())


@dataclass(frozen=True)
class CellMetadata:
    """Per-cell annotation; cell_type may be the UNKNOWN sentinel."""

    cell_id: str
    cell_type: int
    tissue: int
    batch: str


@dataclass
class GeneExpressionMatrix:
    """Cells-by-genes expression values, dense ndarray or CSR sparse."""

    values: "np.ndarray | sp.csr_matrix"
    gene_names: list[str]
    cell_ids: list[str]

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def n_genes(self) -> int:
        return self.values.shape[1]

    @property
    def layout(self) -> str:
        return "sparse" if sp.issparse(self.values) else "dense"

    def to_dense(self) -> np.ndarray:
        if sp.issparse(self.values):
            return np.asarray(self.values.todense(), dtype=np.float64)
        return np.asarray(self.values, dtype=np.float64)

    def row(self, i: int) -> np.ndarray:
        if sp.issparse(self.values):
            return np.asarray(self.values.getrow(i).todense()).ravel()
        return np.asarray(self.values[i], dtype=np.float64)

    def row_sums(self) -> np.ndarray:
        if sp.issparse(self.values):
            return np.asarray(self.values.sum(axis=1)).ravel()
        return self.values.sum(axis=1)

    def subset_cells(self, rows) -> "GeneExpressionMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        vals = self.values[rows]
        return GeneExpressionMatrix(vals, list(self.gene_names), [self.cell_ids[i] for i in rows])

    def subset_genes(self, cols) -> "GeneExpressionMatrix":
        cols = np.asarray(cols, dtype=np.int64)
        vals = self.values[:, cols]
        return GeneExpressionMatrix(vals, [self.gene_names[j] for j in cols], list(self.cell_ids))

    def copy(self) -> "GeneExpressionMatrix":
        return GeneExpressionMatrix(self.values.copy(), list(self.gene_names), list(self.cell_ids))

    def digest(self) -> str:
        if sp.issparse(self.values):
            v = self.values.tocsr()
            return array_digest(v.data, v.indices, v.indptr)
        return array_digest(self.values)

    def validate(self) -> None:
        if self.values.ndim != 2:
            raise DataError(f"expected a 2-d matrix, got {self.values.ndim}-d")
        if len(self.gene_names) != self.n_genes:
            raise DataError(
                f"{len(self.gene_names)} gene names for {self.n_genes} columns"
            )
        if len(self.cell_ids) != self.n_cells:
            raise DataError(f"{len(self.cell_ids)} cell ids for {self.n_cells} rows")
        seen: dict[str, int] = {}
        for j, g in enumerate(self.gene_names):
            if g in seen:
                raise DataError(f"duplicate gene name '{g}' at columns {seen[g]} and {j}")
            seen[g] = j
        seen_cells: dict[str, int] = {}
        for i, c in enumerate(self.cell_ids):
            if c in seen_cells:
                raise DataError(f"duplicate cell id '{c}' at rows {seen_cells[c]} and {i}")
            seen_cells[c] = i
        dense_view = self.values.data if sp.issparse(self.values) else self.values
        if dense_view.size:
            if not np.all(np.isfinite(dense_view)):
                idx = self._locate(lambda a: ~np.isfinite(a))
                raise DataError(f"non-finite value at {idx}")
            if dense_view.min(initial=0.0) < 0:
                idx = self._locate(lambda a: a < 0)
                raise DataError(f"negative value at {idx}")

    def _locate(self, pred) -> tuple[int, int]:
        """Matrix coordinates (0-based) of the first entry matching pred."""
        if sp.issparse(self.values):
            coo = self.values.tocoo()
            bad = np.nonzero(pred(coo.data))[0]
            k = bad[0]
            return int(coo.row[k]), int(coo.col[k])
        r, c = np.nonzero(pred(self.values))
        return int(r[0]), int(c[0])


@dataclass(frozen=True)
class DatasetSplit:
    """Row indices for the train, validation and test partitions."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def to_dict(self) -> dict:
        return {
            "train": self.train.tolist(),
            "val": self.val.tolist(),
            "test": self.test.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(
            np.asarray(d["train"], dtype=np.int64),
            np.asarray(d["val"], dtype=np.int64),
            np.asarray(d["test"], dtype=np.int64),
        )


@dataclass(frozen=True)
class LoadedData:
    """A matrix, its per-cell metadata and the vocabulary they reference."""

    matrix: GeneExpressionMatrix
    metadata: list[CellMetadata]
    vocab: LabelVocabulary

    def labels(self) -> np.ndarray:
        return np.asarray([m.cell_type for m in self.metadata], dtype=np.int64)

    def tissues(self) -> np.ndarray:
        return np.asarray([m.tissue for m in self.metadata], dtype=np.int64)


def _fmt_float(v: float) -> str:
    # repr round-trips doubles exactly, which keeps write -> load bit-exact
    return repr(float(v))


def _parse_value(tok: str, row: int, col: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise DataError(f"malformed value '{tok}' at ({row},{col})") from None
    if not math.isfinite(v):
        raise DataError(f"non-finite value at ({row},{col})")
    if v < 0:
        raise DataError(f"negative value at ({row},{col})")
    return v


def write_metadata(metadata: list[CellMetadata], vocab: LabelVocabulary, path) -> None:
    lines = ["cell_id,cell_type,tissue,batch"]
    for m in metadata:
        lines.append(
            f"{m.cell_id},{vocab.cell_type_name(m.cell_type)},"
            f"{vocab.tissue_name(m.tissue)},{m.batch}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_metadata(path, vocab: LabelVocabulary | None = None, extend: bool = True):
    """Parse a metadata sidecar.

    Label names are resolved through `vocab` when given, extending it for
    unseen names unless extend is False. Returns (metadata, vocab).
    """
    if vocab is None:
        vocab = LabelVocabulary()
    try:
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh]
    except FileNotFoundError:
        raise DataError(
            f"metadata sidecar {path} not found; every matrix needs one "
            f"(unlabeled query cells use cell_type=unknown)") from None
    if not lines or lines[0] != "cell_id,cell_type,tissue,batch":
        raise DataError(f"metadata file {path} must start with header 'cell_id,cell_type,tissue,batch'")
    metadata = []
    seen: set[str] = set()
    for i, ln in enumerate(lines[1:], start=1):
        if not ln:
            continue
        parts = ln.split(",")
        if len(parts) != 4:
            raise DataError(f"metadata row {i} has {len(parts)} fields, expected 4")
        cell_id, type_name, tissue_name, batch = parts
        if cell_id in seen:
            raise DataError(f"duplicate cell id '{cell_id}' in metadata row {i}")
        seen.add(cell_id)
        if type_name == UNKNOWN_NAME:
            ct = UNKNOWN
        elif vocab.has_cell_type(type_name) or not extend:
            ct = vocab.cell_type_index(type_name)
        else:
            ct = vocab.add_cell_type(type_name)
        if tissue_name == UNKNOWN_NAME:
            ti = UNKNOWN
        elif tissue_name in vocab.tissues or not extend:
            ti = vocab.tissue_index(tissue_name)
        else:
            ti = vocab.add_tissue(tissue_name)
        metadata.append(CellMetadata(cell_id, ct, ti, batch))
    return metadata, vocab


def _meta_path(path: str) -> str:
    stem = path
    for suffix in (".csv", ".mtx", ".txt"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
            break
    return stem + ".meta.csv"


def _genes_path(path: str) -> str:
    stem = path
    if stem.endswith(".mtx"):
        stem = stem[:-4]
    return stem + ".genes.txt"


def load_matrix(path, fmt: str | None = None, vocab: LabelVocabulary | None = None,
                extend_vocab: bool = True) -> LoadedData:
    """Load an expression matrix plus its metadata sidecar.

    fmt is "dense-csv" or "sparse-mtx"; inferred from the extension when
    omitted (.csv dense, .mtx sparse).
    """
    path = str(path)
    if fmt is None:
        if path.endswith(".csv"):
            fmt = "dense-csv"
        elif path.endswith(".mtx"):
            fmt = "sparse-mtx"
        else:
            raise DataError(f"cannot infer format of '{path}', pass fmt explicitly")
    metadata, vocab = read_metadata(_meta_path(path), vocab, extend=extend_vocab)
    if fmt == "dense-csv":
        matrix = _load_dense(path, metadata)
    elif fmt == "sparse-mtx":
        matrix = _load_sparse(path, metadata)
    else:
        raise DataError(f"unknown matrix format '{fmt}'")
    matrix.validate()
    return LoadedData(matrix, metadata, vocab)


def _load_dense(path: str, metadata: list[CellMetadata]) -> GeneExpressionMatrix:
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        cols = header.split(",")
        if not cols or cols[0] != "cell_id":
            raise DataError(f"dense matrix {path} must start with a 'cell_id' header column")
        gene_names = cols[1:]
        if not gene_names:
            raise DataError(f"dense matrix {path} declares no genes")
        rows = []
        cell_ids = []
        for i, ln in enumerate(fh):
            ln = ln.rstrip("\n")
            if not ln:
                continue
            parts = ln.split(",")
            if len(parts) != len(gene_names) + 1:
                raise DataError(
                    f"row {i} has {len(parts) - 1} values, expected {len(gene_names)}"
                )
            cell_ids.append(parts[0])
            rows.append([_parse_value(tok, i, j) for j, tok in enumerate(parts[1:])])
    values = np.asarray(rows, dtype=np.float64)
    if values.size == 0:
        raise DataError(f"dense matrix {path} contains no cells")
    _check_meta_alignment(cell_ids, metadata)
    return GeneExpressionMatrix(values, gene_names, cell_ids)


def _load_sparse(path: str, metadata: list[CellMetadata]) -> GeneExpressionMatrix:
    genes_path = _genes_path(path)
    try:
        with open(genes_path) as fh:
            gene_names = [ln.rstrip("\n") for ln in fh if ln.strip()]
    except FileNotFoundError:
        raise DataError(f"sparse matrix {path} needs a gene-name sidecar at {genes_path}") from None
    with open(path) as fh:
        banner = fh.readline()
        if not banner.startswith("%"):
            raise DataError(f"sparse matrix {path} must start with a '%' banner line")
        dims = fh.readline().split()
        if len(dims) != 3:
            raise DataError(f"sparse matrix {path} dimension line must be 'n_cells n_genes n_entries'")
        try:
            n, g, nnz = (int(x) for x in dims)
        except ValueError:
            raise DataError(f"sparse matrix {path} has a malformed dimension line") from None
        if g != len(gene_names):
            raise DataError(f"{len(gene_names)} gene names for {g} declared columns")
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz, dtype=np.float64)
        seen: set[tuple[int, int]] = set()
        k = 0
        for ln in fh:
            parts = ln.split()
            if not parts:
                continue
            if k >= nnz:
                raise DataError(f"sparse matrix {path} has more than the declared {nnz} entries")
            if len(parts) != 3:
                raise DataError(f"entry {k} is not a 'row col value' triple")
            try:
                r1, c1 = int(parts[0]), int(parts[1])
            except ValueError:
                raise DataError(f"entry {k} has non-integer indices") from None
            if not (1 <= r1 <= n and 1 <= c1 <= g):
                raise DataError(
                    f"entry {k} index ({r1},{c1}) outside 1..{n} x 1..{g}"
                )
            r, c = r1 - 1, c1 - 1
            if (r, c) in seen:
                raise DataError(f"duplicate entry at ({r},{c})")
            seen.add((r, c))
            vals[k] = _parse_value(parts[2], r, c)
            rows[k], cols[k] = r, c
            k += 1
        if k != nnz:
            raise DataError(f"sparse matrix {path} declares {nnz} entries but has {k}")
    values = sp.coo_matrix((vals, (rows, cols)), shape=(n, g)).tocsr()
    cell_ids = [m.cell_id for m in metadata]
    if len(cell_ids) != n:
        raise DataError(f"metadata lists {len(cell_ids)} cells but matrix declares {n} rows")
    return GeneExpressionMatrix(values, gene_names, cell_ids)


def _check_meta_alignment(cell_ids: list[str], metadata: list[CellMetadata]) -> None:
    if len(metadata) != len(cell_ids):
        raise DataError(
            f"metadata lists {len(metadata)} cells but matrix has {len(cell_ids)} rows"
        )
    for i, (cid, m) in enumerate(zip(cell_ids, metadata)):
        if cid != m.cell_id:
            raise DataError(
                f"row {i}: matrix cell '{cid}' does not match metadata cell '{m.cell_id}'"
            )


def write_matrix(data: LoadedData, path, fmt: str | None = None) -> None:
    """Write matrix, metadata sidecar and (for sparse) the gene sidecar."""
    path = str(path)
    if fmt is None:
        fmt = "sparse-mtx" if path.endswith(".mtx") else "dense-csv"
    matrix = data.matrix
    if fmt == "dense-csv":
        dense = matrix.to_dense()
        with open(path, "w") as fh:
            fh.write("cell_id," + ",".join(matrix.gene_names) + "\n")
            for i, cid in enumerate(matrix.cell_ids):
                fh.write(cid + "," + ",".join(_fmt_float(v) for v in dense[i]) + "\n")
    elif fmt == "sparse-mtx":
        coo = sp.coo_matrix(matrix.values)
        order = np.lexsort((coo.col, coo.row))
        with open(path, "w") as fh:
            fh.write("%%expression coordinate real\n")
            fh.write(f"{matrix.n_cells} {matrix.n_genes} {coo.nnz}\n")
            for k in order:
                fh.write(f"{coo.row[k] + 1} {coo.col[k] + 1} {_fmt_float(coo.data[k])}\n")
        with open(_genes_path(path), "w") as fh:
            fh.write("\n".join(matrix.gene_names) + "\n")
    else:
        raise DataError(f"unknown matrix format '{fmt}'")
    write_metadata(data.metadata, data.vocab, _meta_path(path))


def normalize(matrix: GeneExpressionMatrix, target_sum: float = 1e4,
              log1p: bool = True) -> GeneExpressionMatrix:
    """Scale each cell to a fixed total count, then optionally log1p.

    Rows with zero total are a hard error naming the cell, they must be
    removed by filter_qc first.
    """
    if target_sum <= 0:
        raise DataError(f"target_sum must be positive, got {target_sum}")
    sums = matrix.row_sums()
    zero = np.nonzero(sums <= 0)[0]
    if zero.size:
        raise DataError(f"zero-total row for cell '{matrix.cell_ids[int(zero[0])]}'")
    scale = target_sum / sums
    if sp.issparse(matrix.values):
        out = sp.diags(scale) @ matrix.values.tocsr()
        out = out.tocsr()
        if log1p:
            out.data = np.log1p(out.data)
    else:
        out = matrix.values * scale[:, None]
        if log1p:
            out = np.log1p(out)
    return GeneExpressionMatrix(out, list(matrix.gene_names), list(matrix.cell_ids))


def filter_qc(matrix: GeneExpressionMatrix, metadata: list[CellMetadata],
              min_genes_per_cell: int = 1, min_cells_per_gene: int = 1):
    """Drop low-coverage cells, then genes seen in too few remaining cells.

    Returns (matrix, metadata). Raises if nothing survives.
    """
    if sp.issparse(matrix.values):
        expressed = matrix.values > 0
        genes_per_cell = np.asarray(expressed.sum(axis=1)).ravel()
    else:
        expressed = matrix.values > 0
        genes_per_cell = expressed.sum(axis=1)
    cell_mask = genes_per_cell >= min_genes_per_cell
    if not cell_mask.any():
        raise DataError("all cells filtered by the QC thresholds")
    kept_rows = np.nonzero(cell_mask)[0]
    sub = matrix.subset_cells(kept_rows)
    if sp.issparse(sub.values):
        cells_per_gene = np.asarray((sub.values > 0).sum(axis=0)).ravel()
    else:
        cells_per_gene = (sub.values > 0).sum(axis=0)
    gene_mask = cells_per_gene >= min_cells_per_gene
    if not gene_mask.any():
        raise DataError("all genes filtered by the QC thresholds")
    sub = sub.subset_genes(np.nonzero(gene_mask)[0])
    kept_meta = [metadata[i] for i in kept_rows]
    return sub, kept_meta


def _apportion(size: int, ratios: tuple[int, ...]) -> list[int]:
    """Largest-remainder allocation; ties favor earlier ratio positions."""
    total = float(sum(ratios))
    exact = [size * r / total for r in ratios]
    counts = [int(math.floor(e)) for e in exact]
    remainder = size - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in range(remainder):
        counts[order[i]] += 1
    return counts


def stratified_split(metadata: list[CellMetadata], ratios: tuple[int, int, int] = (8, 1, 1),
                     seed: int = 0, vocab: LabelVocabulary | None = None) -> DatasetSplit:
    """Per-class 8:1:1 split with deterministic shuffling.

    Remainders go by largest fractional part with ties favoring train, then
    val, then test. Small classes (3..9 cells) get val and test floored to
    one cell so no partition is empty; classes under 3 cells are an error.
    """
    labels = np.asarray([m.cell_type for m in metadata], dtype=np.int64)
    rng = rng_for(seed, "stratified-split")
    train_parts, val_parts, test_parts = [], [], []
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        if idx.size < 3:
            name = vocab.cell_type_name(int(cls)) if vocab is not None else str(int(cls))
            raise DataError(
                f"class '{name}' has {idx.size} cells, need at least 3 to split"
            )
        idx = idx[rng.permutation(idx.size)]
        n_train, n_val, n_test = _apportion(idx.size, ratios)
        # keep every partition nonempty for small classes
        for pos in (1, 2):
            counts = [n_train, n_val, n_test]
            if counts[pos] == 0 and n_train > 1:
                n_train -= 1
                if pos == 1:
                    n_val += 1
                else:
                    n_test += 1
        train_parts.append(idx[:n_train])
        val_parts.append(idx[n_train:n_train + n_val])
        test_parts.append(idx[n_train + n_val:])
    return DatasetSplit(
        np.sort(np.concatenate(train_parts)),
        np.sort(np.concatenate(val_parts)),
        np.sort(np.concatenate(test_parts)),
    )


@dataclass(frozen=True)
class SynthesisConfig:
    """Knobs for the Gaussian-mixture synthetic corpus."""

    tissues: int = 1
    classes_per_tissue: int = 4
    cells_per_class: int = 100
    genes: int = 60
    marker_genes_per_class: int = 5
    marker_strength: float = 5.0
    baseline_mean: float = 1.0
    noise_level: float = 0.5
    batches: int = 1
    batch_shift: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.tissues < 1 or self.classes_per_tissue < 1:
            raise DataError("need at least one tissue and one class per tissue")
        if self.cells_per_class < 1:
            raise DataError("cells_per_class must be positive")
        k = self.tissues * self.classes_per_tissue
        need = k * self.marker_genes_per_class
        if self.genes < need:
            raise DataError(
                f"{self.genes} genes cannot hold {k} disjoint marker blocks of "
                f"{self.marker_genes_per_class}"
            )
        if self.noise_level < 0 or self.batch_shift < 0:
            raise DataError("noise_level and batch_shift must be nonnegative")
        if self.batches < 1:
            raise DataError("batches must be positive")


def synthesize(cfg: SynthesisConfig) -> LoadedData:
    """Generate a labeled synthetic corpus.

    Each class owns a disjoint marker-gene block with elevated mean on top of
    a small baseline; Gaussian noise and an optional additive per-batch shift
    are applied and values are clipped at zero. Identical configs give
    bit-identical corpora.
    """
    cfg.validate()
    rng = rng_for(cfg.seed, "synthesize")
    k = cfg.tissues * cfg.classes_per_tissue
    n = k * cfg.cells_per_class

    means = np.full((k, cfg.genes), cfg.baseline_mean, dtype=np.float64)
    for c in range(k):
        lo = c * cfg.marker_genes_per_class
        means[c, lo:lo + cfg.marker_genes_per_class] += cfg.marker_strength

    shifts = rng.normal(0.0, cfg.batch_shift or 0.0, size=(cfg.batches, cfg.genes)) \
        if cfg.batch_shift > 0 else np.zeros((cfg.batches, cfg.genes))

    labels = np.repeat(np.arange(k), cfg.cells_per_class)
    noise = rng.normal(0.0, cfg.noise_level, size=(n, cfg.genes)) \
        if cfg.noise_level > 0 else np.zeros((n, cfg.genes))
    batch_of = np.arange(n) % cfg.batches
    values = means[labels] + noise + shifts[batch_of]
    np.clip(values, 0.0, None, out=values)

    vocab = LabelVocabulary()
    for t in range(cfg.tissues):
        vocab.add_tissue(f"tissue{t}")
    for c in range(k):
        vocab.add_cell_type(f"type{c:02d}")
    gene_names = [f"g{j:04d}" for j in range(cfg.genes)]
    cell_ids = [f"cell{i:05d}" for i in range(n)]
    metadata = [
        CellMetadata(cell_ids[i], int(labels[i]), int(labels[i]) // cfg.classes_per_tissue,
                     f"b{int(batch_of[i])}")
        for i in range(n)
    ]
    matrix = GeneExpressionMatrix(values, gene_names, cell_ids)
    matrix.validate()
    return LoadedData(matrix, metadata, vocab)


def subset_loaded(data: LoadedData, rows) -> LoadedData:
    """Row subset of matrix and metadata, vocabulary shared."""
    rows = np.asarray(rows, dtype=np.int64)
    return LoadedData(
        data.matrix.subset_cells(rows),
        [data.metadata[int(i)] for i in rows],
        data.vocab,
    )
