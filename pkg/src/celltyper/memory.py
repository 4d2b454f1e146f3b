"""Dual vector stores with an IVF-flat index, history log and dataset pools.

The store keeps two aligned sub-stores: "g" holds standard embeddings from
the frozen encoder, "s" holds lora-enhanced embeddings from tissue plugins.
Indexing is inverted-file flat: k-means centroids partition the records,
queries probe the nprobe nearest lists and scan them exhaustively. Probing
every list is exactly brute force, and the score math is written per record
(no batched matmul) so probed and exact paths produce bit-identical scores.

Scores are euclidean distances (ascending) or cosine similarities
(descending); ties always break by ascending record id.

Inserts after build route to the nearest centroid without re-clustering.
A rebuild is exposed and recommended once a sub-store doubles in size,
and after a plugin retrain if enhanced-store consistency matters more
than the insert history.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import LoadedData
from .errors import DataError, StoreError
from .util import array_digest, json_digest, rng_for, stable_json

FORMAT_VERSION = 1

NLIST_MIN = 1
NLIST_MAX = 4096

SOURCE_OF = {"g": "standard", "s": "lora-enhanced"}


def default_nlist(n_records: int) -> int:
    return int(min(max(np.ceil(np.sqrt(n_records)), NLIST_MIN), NLIST_MAX))


def default_nprobe(nlist: int) -> int:
    return min(8, nlist)


@dataclass(frozen=True)
class EmbeddingRecord:
    vector: np.ndarray
    cell_type: int
    tissue: int
    source: str  # "standard" or "lora-enhanced"
    cell_id: str


@dataclass(frozen=True)
class SearchHit:
    record_id: int
    cell_type: int
    score: float
    cell_id: str


def _sq_dist_matrix(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """All-pairs squared distances, used only inside k-means."""
    x2 = np.sum(x * x, axis=1)[:, None]
    c2 = np.sum(c * c, axis=1)[None, :]
    return np.maximum(x2 + c2 - 2.0 * (x @ c.T), 0.0)


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100):
    """Seeded k-means++ init then Lloyd's iterations.

    Empty clusters are re-seeded from the point currently farthest from its
    centroid. Returns (centroids, assignments).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not (1 <= k <= n):
        raise StoreError(f"cannot build {k} clusters from {n} points")
    rng = rng_for(seed, "kmeans")
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[int(rng.integers(n))]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        probs = d2 / total if total > 0 else np.full(n, 1.0 / n)
        centroids[j] = x[int(rng.choice(n, p=probs))]
        d2 = np.minimum(d2, np.sum((x - centroids[j]) ** 2, axis=1))

    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        dist2 = _sq_dist_matrix(x, centroids)
        new_assign = np.argmin(dist2, axis=1).astype(np.int64)
        own = dist2[np.arange(n), new_assign]
        for j in range(k):
            if not np.any(new_assign == j):
                far = int(np.argmax(own))
                centroids[j] = x[far]
                new_assign[far] = j
                own[far] = 0.0
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        counts = np.bincount(assign, minlength=k).astype(np.float64)
        nonzero = counts > 0
        centroids[nonzero] = sums[nonzero] / counts[nonzero, None]
    return centroids, assign


@dataclass
class SubStore:
    """One metric space: records, centroids and inverted lists."""

    source: str
    metric: str
    nlist: int
    nprobe: int
    centroids: np.ndarray  # (nlist, dim) float32
    lists: list[list[int]]
    vectors: np.ndarray  # (n, dim) float32, row index = record id
    cell_types: np.ndarray
    tissues: np.ndarray
    cell_ids: list[str]

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def record(self, record_id: int) -> EmbeddingRecord:
        return EmbeddingRecord(self.vectors[record_id], int(self.cell_types[record_id]),
                               int(self.tissues[record_id]), self.source,
                               self.cell_ids[record_id])

    def copy(self) -> "SubStore":
        return SubStore(self.source, self.metric, self.nlist, self.nprobe,
                        self.centroids.copy(), [list(l) for l in self.lists],
                        self.vectors.copy(), self.cell_types.copy(),
                        self.tissues.copy(), list(self.cell_ids))

    def digest(self) -> str:
        return array_digest(self.vectors, self.centroids, self.cell_types, self.tissues)


@dataclass
class VectorStore:
    g: SubStore
    s: SubStore

    def sub(self, which: str) -> SubStore:
        if which in ("g", "standard"):
            return self.g
        if which in ("s", "lora-enhanced"):
            return self.s
        raise StoreError(f"unknown sub-store '{which}'")

    def copy(self) -> "VectorStore":
        return VectorStore(self.g.copy(), self.s.copy())

    def digest(self) -> str:
        return json_digest({"g": self.g.digest(), "s": self.s.digest()})


def build_index(records: list[EmbeddingRecord], nlist: int | None = None,
                metric: str = "euclidean", nprobe: int | None = None,
                seed: int = 0, source: str | None = None) -> SubStore:
    """Cluster records into an IVF-flat sub-store.

    nlist defaults to ceil(sqrt(n)) clamped to [1, 4096]; nprobe defaults to
    min(8, nlist). All records must share one source tag.
    """
    if not records:
        raise StoreError("cannot build an index from zero records")
    if metric not in ("euclidean", "cosine"):
        raise StoreError(f"unknown metric '{metric}'")
    if source is None:
        source = records[0].source
    for r in records:
        if r.source != source:
            raise StoreError(f"record '{r.cell_id}' has source '{r.source}', store is '{source}'")
    vectors = np.ascontiguousarray([r.vector for r in records], dtype=np.float32)
    n = vectors.shape[0]
    if nlist is None:
        nlist = default_nlist(n)
    if not (1 <= nlist <= n):
        raise StoreError(f"nlist {nlist} not in 1..{n} (need at least nlist records)")
    if nprobe is None:
        nprobe = default_nprobe(nlist)
    centroids, assign = kmeans(vectors, nlist, seed=seed)
    centroids = centroids.astype(np.float32)
    lists: list[list[int]] = [[] for _ in range(nlist)]
    for i, a in enumerate(assign):
        lists[int(a)].append(i)
    return SubStore(
        source, metric, nlist, min(nprobe, nlist), centroids, lists, vectors,
        np.asarray([r.cell_type for r in records], dtype=np.int64),
        np.asarray([r.tissue for r in records], dtype=np.int64),
        [r.cell_id for r in records],
    )


def _record_scores(metric: str, query: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Per-record scores computed row-locally.

    Row-local reductions keep scores bit-identical whether a record is
    scanned inside one probed list or in a full sweep.
    """
    q = np.asarray(query, dtype=np.float64)
    v = vectors.astype(np.float64)
    if metric == "euclidean":
        d = v - q
        return np.sqrt(np.sum(d * d, axis=1))
    num = np.sum(v * q, axis=1)
    qn = float(np.sqrt(np.sum(q * q)))
    vn = np.sqrt(np.sum(v * v, axis=1))
    if qn == 0.0 or np.any(vn == 0.0):
        raise StoreError("cosine score undefined for a zero-norm vector")
    return num / (vn * qn)


def _rank(metric: str, scores: np.ndarray, ids: np.ndarray, m: int) -> list[tuple[int, float]]:
    key = scores if metric == "euclidean" else -scores
    order = np.lexsort((ids, key))[:m]
    return [(int(ids[i]), float(scores[i])) for i in order]


def _check_query(sub: SubStore, query: np.ndarray) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != sub.dim:
        raise StoreError(f"query dim {q.shape[0]} does not match store dim {sub.dim}")
    if sub.size == 0:
        raise StoreError("store is empty")
    return q


def _hits(sub: SubStore, ranked) -> list[SearchHit]:
    return [SearchHit(rid, int(sub.cell_types[rid]), score, sub.cell_ids[rid])
            for rid, score in ranked]


def search_topm(sub: SubStore, query: np.ndarray, m: int,
                nprobe: int | None = None) -> list[SearchHit]:
    """Probe the nprobe nearest inverted lists and scan them exhaustively."""
    q = _check_query(sub, query)
    if m < 1:
        raise StoreError("m must be at least 1")
    if nprobe is None:
        nprobe = sub.nprobe
    nprobe = min(max(nprobe, 1), sub.nlist)
    cd = _record_scores("euclidean", q, sub.centroids)
    probe = np.lexsort((np.arange(sub.nlist), cd))[:nprobe]
    ids = np.asarray([i for p in probe for i in sub.lists[p]], dtype=np.int64)
    if ids.size == 0:
        return []
    scores = _record_scores(sub.metric, q, sub.vectors[ids])
    return _hits(sub, _rank(sub.metric, scores, ids, m))


def exact_search(sub: SubStore, query: np.ndarray, m: int) -> list[SearchHit]:
    """Brute-force scan of every record; the oracle for search_topm."""
    q = _check_query(sub, query)
    if not (1 <= m <= sub.size):
        raise StoreError(f"m {m} not in 1..{sub.size}")
    ids = np.arange(sub.size, dtype=np.int64)
    scores = _record_scores(sub.metric, q, sub.vectors)
    return _hits(sub, _rank(sub.metric, scores, ids, m))


def insert(store: VectorStore | SubStore, which, record: EmbeddingRecord | None = None) -> int:
    """Append one record, routing it to its nearest centroid.

    Accepts (store, "g"/"s", record) or (sub, record). The record becomes
    searchable immediately; clustering is not redone.
    """
    if record is None:
        sub, record = store, which
    else:
        sub = store.sub(which)
    if record.source != sub.source:
        raise StoreError(
            f"record source '{record.source}' does not match store source '{sub.source}'"
        )
    vec = np.asarray(record.vector, dtype=np.float32).ravel()
    if vec.shape[0] != sub.dim:
        raise StoreError(f"record dim {vec.shape[0]} does not match store dim {sub.dim}")
    rid = sub.size
    sub.vectors = np.vstack([sub.vectors, vec[None, :]])
    sub.cell_types = np.append(sub.cell_types, np.int64(record.cell_type))
    sub.tissues = np.append(sub.tissues, np.int64(record.tissue))
    sub.cell_ids.append(record.cell_id)
    cd = _record_scores("euclidean", vec, sub.centroids)
    target = int(np.lexsort((np.arange(sub.nlist), cd))[0])
    sub.lists[target].append(rid)
    return rid


def rebuild(sub: SubStore, nlist: int | None = None, seed: int = 0) -> SubStore:
    """Re-cluster everything; recommended once the store doubles in size."""
    records = [sub.record(i) for i in range(sub.size)]
    return build_index(records, nlist=nlist, metric=sub.metric,
                       nprobe=sub.nprobe, seed=seed, source=sub.source)


@dataclass(frozen=True)
class ClassCentroid:
    cell_type: int
    centroid: np.ndarray
    mean_dist: float
    std_dist: float
    count: int


def class_centroid(sub: SubStore, cell_type: int) -> ClassCentroid:
    """Mean vector of a class plus member-distance statistics."""
    mask = sub.cell_types == cell_type
    count = int(mask.sum())
    if count == 0:
        raise StoreError(f"no records for class {cell_type}")
    members = sub.vectors[mask].astype(np.float64)
    mu = members.mean(axis=0)
    d = members - mu
    dists = np.sqrt(np.sum(d * d, axis=1))
    return ClassCentroid(int(cell_type), mu, float(dists.mean()), float(dists.std()), count)


# ---------------------------------------------------------------------------
# history log and answer cache

@dataclass(frozen=True)
class HistoryEvent:
    seq: int
    kind: str
    payload: dict


class HistoryLog:
    """Append-only event log with a logical clock.

    The sequence counter is the timestamp, so identical runs serialize to
    identical bytes. Wall-clock text belongs in console logging only.
    """

    def __init__(self):
        self._events: list[HistoryEvent] = []

    def append(self, kind: str, payload: dict) -> HistoryEvent:
        ev = HistoryEvent(len(self._events), kind, payload)
        self._events.append(ev)
        return ev

    @property
    def events(self) -> tuple[HistoryEvent, ...]:
        return tuple(self._events)

    def action_sequence(self) -> list[str]:
        return [e.payload.get("action", e.kind) for e in self._events]

    def dumps(self) -> str:
        return "".join(
            stable_json({"seq": e.seq, "kind": e.kind, "payload": e.payload}) + "\n"
            for e in self._events
        )

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def read(cls, path) -> "HistoryLog":
        log = cls()
        with open(path) as fh:
            for ln in fh:
                if not ln.strip():
                    continue
                d = json.loads(ln)
                log._events.append(HistoryEvent(d["seq"], d["kind"], d["payload"]))
        return log


def cache_key(query_text: str, data_digest: str, plugin_versions: dict) -> str:
    """Key over query, data and every plugin version in play."""
    return json_digest({
        "query": query_text,
        "data": data_digest,
        "plugins": {str(k): v for k, v in plugin_versions.items()},
    })


class AnswerCache:
    def __init__(self):
        self._entries: dict[str, dict] = {}

    def put(self, key: str, value: dict) -> None:
        self._entries[key] = value

    def get(self, key: str) -> dict | None:
        return self._entries.get(key)

    def __len__(self) -> int:
        return len(self._entries)


# ---------------------------------------------------------------------------
# per-tissue dataset pools

@dataclass
class TissueDataset:
    data: LoadedData  # normalized rows, matching what plugins train on
    train_rows: np.ndarray
    val_rows: np.ndarray
    dataset_ids: list[str]


class DatasetStore:
    """Normalized per-tissue training pools, merged on incremental updates."""

    def __init__(self):
        self._pools: dict[int, TissueDataset] = {}

    def add(self, tissue: int, data: LoadedData, train_rows, val_rows,
            dataset_id: str) -> None:
        self._pools[tissue] = TissueDataset(
            data, np.asarray(train_rows, dtype=np.int64),
            np.asarray(val_rows, dtype=np.int64), [dataset_id])

    def get(self, tissue: int) -> TissueDataset:
        if tissue not in self._pools:
            raise StoreError(f"no dataset pool for tissue {tissue}")
        return self._pools[tissue]

    def tissues(self) -> list[int]:
        return sorted(self._pools)

    def merge_new(self, tissue: int, new_data: LoadedData) -> str:
        """Append new cells to a pool; most go to train, a slice to val.

        Returns the new dataset id. Gene panels must match exactly and cell
        ids must stay unique.
        """
        pool = self.get(tissue)
        old = pool.data
        if old.matrix.gene_names != new_data.matrix.gene_names:
            raise DataError("new data gene panel does not match the stored pool")
        clash = set(old.matrix.cell_ids) & set(new_data.matrix.cell_ids)
        if clash:
            raise DataError(f"cell id '{sorted(clash)[0]}' already present in the pool")
        if sp.issparse(old.matrix.values) or sp.issparse(new_data.matrix.values):
            values = sp.vstack([sp.csr_matrix(old.matrix.values),
                                sp.csr_matrix(new_data.matrix.values)]).tocsr()
        else:
            values = np.vstack([old.matrix.values, new_data.matrix.values])
        from .data import GeneExpressionMatrix  # local to avoid name clutter

        merged = LoadedData(
            GeneExpressionMatrix(values, list(old.matrix.gene_names),
                                 old.matrix.cell_ids + new_data.matrix.cell_ids),
            old.metadata + new_data.metadata,
            old.vocab,
        )
        n_old = old.matrix.n_cells
        n_new = new_data.matrix.n_cells
        new_rows = np.arange(n_old, n_old + n_new, dtype=np.int64)
        n_val = max(1, n_new // 10) if n_new >= 2 else 0
        val_new = new_rows[n_new - n_val:] if n_val else new_rows[:0]
        train_new = new_rows[:n_new - n_val]
        dataset_id = f"t{tissue}-d{len(pool.dataset_ids)}"
        self._pools[tissue] = TissueDataset(
            merged,
            np.concatenate([pool.train_rows, train_new]),
            np.concatenate([pool.val_rows, val_new]),
            pool.dataset_ids + [dataset_id],
        )
        return dataset_id

    def copy(self) -> "DatasetStore":
        other = DatasetStore()
        for t, pool in self._pools.items():
            other._pools[t] = TissueDataset(
                LoadedData(pool.data.matrix.copy(), list(pool.data.metadata),
                           pool.data.vocab.copy()),
                pool.train_rows.copy(), pool.val_rows.copy(), list(pool.dataset_ids))
        return other

    def digest(self) -> str:
        parts = {}
        for t, pool in sorted(self._pools.items()):
            parts[str(t)] = {
                "matrix": pool.data.matrix.digest(),
                "rows": array_digest(pool.train_rows, pool.val_rows),
                "ids": pool.dataset_ids,
            }
        return json_digest(parts)


# ---------------------------------------------------------------------------
# persistence

def _write_blob(path, a: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_blob(path, shape) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def save_store(store: VectorStore, dirpath) -> None:
    """Manifest plus, per sub-store, centroid blob, vector blob, record
    table and inverted lists."""
    os.makedirs(dirpath, exist_ok=True)
    manifest = {"format_version": FORMAT_VERSION, "subs": {}}
    for name in ("g", "s"):
        sub = store.sub(name)
        manifest["subs"][name] = {
            "source": sub.source, "metric": sub.metric, "nlist": sub.nlist,
            "nprobe": sub.nprobe, "count": sub.size, "dim": sub.dim,
        }
        _write_blob(os.path.join(dirpath, f"{name}_centroids.f32"), sub.centroids)
        _write_blob(os.path.join(dirpath, f"{name}_vectors.f32"), sub.vectors)
        with open(os.path.join(dirpath, f"{name}_records.csv"), "w") as fh:
            fh.write("record_id,cell_id,cell_type,tissue\n")
            for i in range(sub.size):
                fh.write(f"{i},{sub.cell_ids[i]},{int(sub.cell_types[i])},"
                         f"{int(sub.tissues[i])}\n")
        with open(os.path.join(dirpath, f"{name}_lists.json"), "w") as fh:
            json.dump(sub.lists, fh)
            fh.write("\n")
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_store(dirpath) -> VectorStore:
    with open(os.path.join(dirpath, "manifest.json")) as fh:
        manifest = json.load(fh)
    subs = {}
    for name in ("g", "s"):
        meta = manifest["subs"][name]
        centroids = _read_blob(os.path.join(dirpath, f"{name}_centroids.f32"),
                               (meta["nlist"], meta["dim"]))
        vectors = _read_blob(os.path.join(dirpath, f"{name}_vectors.f32"),
                             (meta["count"], meta["dim"]))
        cell_types = np.empty(meta["count"], dtype=np.int64)
        tissues = np.empty(meta["count"], dtype=np.int64)
        cell_ids = []
        with open(os.path.join(dirpath, f"{name}_records.csv")) as fh:
            next(fh)
            for ln in fh:
                rid, cid, ct, ti = ln.rstrip("\n").split(",")
                i = int(rid)
                cell_ids.append(cid)
                cell_types[i] = int(ct)
                tissues[i] = int(ti)
        with open(os.path.join(dirpath, f"{name}_lists.json")) as fh:
            lists = [list(map(int, l)) for l in json.load(fh)]
        subs[name] = SubStore(meta["source"], meta["metric"], meta["nlist"],
                              meta["nprobe"], centroids, lists, vectors,
                              cell_types, tissues, cell_ids)
    return VectorStore(subs["g"], subs["s"])


def save_datasets(store: DatasetStore, dirpath) -> None:
    """Per-tissue pool matrices plus their train/val row assignments."""
    from .data import write_matrix

    os.makedirs(dirpath, exist_ok=True)
    for tissue in store.tissues():
        pool = store.get(tissue)
        write_matrix(pool.data, os.path.join(dirpath, f"t{tissue}.csv"))
        with open(os.path.join(dirpath, f"t{tissue}.rows.json"), "w") as fh:
            json.dump({"train": [int(i) for i in pool.train_rows],
                       "val": [int(i) for i in pool.val_rows],
                       "dataset_ids": pool.dataset_ids}, fh)
            fh.write("\n")


def load_datasets(dirpath, vocab) -> DatasetStore:
    from .data import load_matrix

    store = DatasetStore()
    if not os.path.isdir(dirpath):
        return store
    for name in sorted(os.listdir(dirpath)):
        if not (name.startswith("t") and name.endswith(".csv")
                and not name.endswith(".meta.csv")):
            continue
        tissue = int(name[1:-4])
        data = load_matrix(os.path.join(dirpath, name), vocab=vocab,
                           extend_vocab=False)
        with open(os.path.join(dirpath, f"t{tissue}.rows.json")) as fh:
            rows = json.load(fh)
        store.add(tissue, data, rows["train"], rows["val"],
                  rows["dataset_ids"][0] if rows["dataset_ids"] else f"t{tissue}-d0")
        store.get(tissue).dataset_ids = list(rows["dataset_ids"])
    return store
