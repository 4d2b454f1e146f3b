import numpy as np
import pytest

from celltyper.data import CellMetadata, GeneExpressionMatrix, LabelVocabulary, LoadedData
from celltyper.errors import DataError, StoreError
from celltyper.memory import (
    AnswerCache,
    DatasetStore,
    EmbeddingRecord,
    HistoryLog,
    VectorStore,
    build_index,
    cache_key,
    class_centroid,
    default_nlist,
    exact_search,
    insert,
    kmeans,
    load_datasets,
    load_store,
    rebuild,
    save_datasets,
    save_store,
    search_topm,
)


def _records(n, d=4, seed=0, source="standard", tissue=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d)).astype(np.float32)
    return [EmbeddingRecord(x[i], int(i % 3), tissue, source, f"c{i:04d}")
            for i in range(n)]


def test_default_nlist_is_sqrt_clamped():
    assert default_nlist(1) == 1
    assert default_nlist(100) == 10
    assert default_nlist(101) == 11
    assert default_nlist(10 ** 9) == 4096


def test_kmeans_is_deterministic_and_partitions():
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(loc=0, size=(30, 3)),
                        rng.normal(loc=8, size=(30, 3))])
    c1, a1 = kmeans(x, 2, seed=5)
    c2, a2 = kmeans(x, 2, seed=5)
    assert np.array_equal(c1, c2) and np.array_equal(a1, a2)
    # the two blobs separate cleanly
    assert len(set(a1[:30])) == 1 and len(set(a1[30:])) == 1
    assert a1[0] != a1[-1]
    with pytest.raises(StoreError):
        kmeans(x, 0)
    with pytest.raises(StoreError):
        kmeans(x[:3], 4)


def test_build_index_defaults_and_source_tagging():
    sub = build_index(_records(100), seed=3)
    assert sub.nlist == 10
    assert sub.nprobe == 8
    assert sub.size == 100 and sub.dim == 4
    assert sub.source == "standard"
    assert sorted(i for lst in sub.lists for i in lst) == list(range(100))
    with pytest.raises(StoreError):
        build_index([])
    mixed = _records(4) + _records(4, seed=1, source="lora-enhanced")
    with pytest.raises(StoreError):
        build_index(mixed)


def test_probed_scan_with_full_probe_equals_exact():
    sub = build_index(_records(300, seed=7), nlist=12, seed=7)
    rng = np.random.default_rng(8)
    for _ in range(20):
        q = rng.normal(size=4).astype(np.float32)
        a = search_topm(sub, q, 10, nprobe=sub.nlist)
        b = exact_search(sub, q, 10)
        assert [h.record_id for h in a] == [h.record_id for h in b]
        assert [h.score for h in a] == [h.score for h in b]


def test_ties_break_by_ascending_record_id():
    v = np.zeros(3, dtype=np.float32)
    recs = [EmbeddingRecord(v, 0, 0, "standard", f"c{i}") for i in range(5)]
    sub = build_index(recs, nlist=1)
    hits = exact_search(sub, v, 5)
    assert [h.record_id for h in hits] == [0, 1, 2, 3, 4]
    assert all(h.score == 0.0 for h in hits)


def test_cosine_metric_orders_by_angle():
    recs = [EmbeddingRecord(np.array([1.0, 0.0], dtype=np.float32), 0, 0, "standard", "a"),
            EmbeddingRecord(np.array([1.0, 1.0], dtype=np.float32), 0, 0, "standard", "b"),
            EmbeddingRecord(np.array([0.0, 1.0], dtype=np.float32), 0, 0, "standard", "c")]
    sub = build_index(recs, nlist=1, metric="cosine")
    hits = exact_search(sub, np.array([1.0, 0.1], dtype=np.float32), 3)
    assert [h.cell_id for h in hits] == ["a", "b", "c"]


def test_insert_routes_and_is_searchable():
    sub = build_index(_records(50, seed=2), nlist=5, seed=2)
    far = np.full(4, 50.0, dtype=np.float32)
    rid = insert(sub, EmbeddingRecord(far, 9, 1, "standard", "new"))
    assert rid == 50
    hits = search_topm(sub, far, 1, nprobe=1)
    assert hits[0].record_id == rid
    assert hits[0].cell_id == "new"
    # routed to exactly one inverted list
    assert sum(lst.count(rid) for lst in sub.lists) == 1


def test_rebuild_keeps_records_and_reclusters():
    sub = build_index(_records(40, seed=4), nlist=4, seed=4)
    insert(sub, EmbeddingRecord(np.ones(4, dtype=np.float32), 1, 0, "standard", "x"))
    rb = rebuild(sub, seed=9)
    assert rb.size == 41
    assert rb.nlist == default_nlist(41)
    q = np.ones(4, dtype=np.float32)
    assert exact_search(rb, q, 1)[0].cell_id == "x"


def test_class_centroid_population_stats():
    vecs = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [9.0, 9.0]], dtype=np.float32)
    recs = [EmbeddingRecord(vecs[i], 0 if i < 3 else 1, 0, "standard", f"c{i}")
            for i in range(4)]
    sub = build_index(recs, nlist=1)
    cc = class_centroid(sub, 0)
    # centroid (2/3, 2/3); member distances hand-computed
    mu = np.array([2.0 / 3.0, 2.0 / 3.0])
    d = np.sqrt(((vecs[:3].astype(np.float64) - mu) ** 2).sum(axis=1))
    assert np.allclose(cc.centroid, mu, atol=1e-12)
    assert cc.mean_dist == pytest.approx(d.mean())
    assert cc.std_dist == pytest.approx(d.std())  # population, ddof=0
    assert cc.count == 3
    with pytest.raises(StoreError):
        class_centroid(sub, 5)


def test_store_roundtrip_preserves_digest(tmp_path):
    g = build_index(_records(30, seed=5), seed=5, source="standard")
    s = build_index(_records(30, seed=6, source="lora-enhanced"), seed=6,
                    source="lora-enhanced")
    store = VectorStore(g, s)
    save_store(store, tmp_path / "store")
    back = load_store(tmp_path / "store")
    assert back.digest() == store.digest()
    q = np.zeros(4, dtype=np.float32)
    assert ([h.record_id for h in exact_search(back.g, q, 5)]
            == [h.record_id for h in exact_search(store.g, q, 5)])


# ---------------------------------------------------------------------------
# history, cache, pools

def test_history_log_sequences_and_roundtrips(tmp_path):
    log = HistoryLog()
    log.append("action", {"action": "Encode", "cells": 3})
    log.append("predicate", {"name": "consent-yes", "value": False})
    assert [e.seq for e in log.events] == [0, 1]
    assert log.action_sequence() == ["Encode", "predicate"]
    path = tmp_path / "h.jsonl"
    log.write(path)
    back = HistoryLog.read(path)
    assert back.dumps() == log.dumps()


def test_cache_key_covers_all_inputs():
    base = cache_key("q", "d", {"0": 1})
    assert base == cache_key("q", "d", {"0": 1})
    assert base != cache_key("q2", "d", {"0": 1})
    assert base != cache_key("q", "d2", {"0": 1})
    assert base != cache_key("q", "d", {"0": 2})
    c = AnswerCache()
    assert c.get(base) is None
    c.put(base, {"answer": "x"})
    assert c.get(base) == {"answer": "x"}
    assert len(c) == 1


def _pool_data(n=10, genes=4, prefix="p", cls=0):
    vocab = LabelVocabulary(["a", "b"], ["t0"])
    meta = [CellMetadata(f"{prefix}{i}", cls, 0, "b0") for i in range(n)]
    rng = np.random.default_rng(hash(prefix) % 1000)
    mat = GeneExpressionMatrix(rng.gamma(1.0, size=(n, genes)),
                               [f"g{j}" for j in range(genes)],
                               [m.cell_id for m in meta])
    return LoadedData(mat, meta, vocab)


def test_dataset_store_merge_rules():
    store = DatasetStore()
    data = _pool_data(10)
    store.add(0, data, list(range(8)), [8, 9], dataset_id="t0-d0")
    new = _pool_data(5, prefix="n", cls=1)
    did = store.merge_new(0, new)
    assert did == "t0-d1"
    pool = store.get(0)
    assert pool.data.matrix.n_cells == 15
    assert pool.dataset_ids == ["t0-d0", "t0-d1"]
    # 5 new cells: floor(5/10)=0 -> max(1, 0)=1 val cell, the LAST one
    assert pool.train_rows.size == 8 + 4
    assert pool.val_rows.size == 2 + 1
    assert 14 in pool.val_rows.tolist()


def test_dataset_store_rejects_bad_merges():
    store = DatasetStore()
    store.add(0, _pool_data(6), list(range(5)), [5], dataset_id="t0-d0")
    with pytest.raises(StoreError):
        store.merge_new(1, _pool_data(3, prefix="n"))
    wrong_panel = _pool_data(3, genes=5, prefix="w")
    with pytest.raises(DataError):
        store.merge_new(0, wrong_panel)
    dupe = _pool_data(3)  # same cell ids as the pool
    with pytest.raises(DataError):
        store.merge_new(0, dupe)


def test_dataset_store_roundtrip(tmp_path):
    store = DatasetStore()
    data = _pool_data(9)
    store.add(0, data, list(range(7)), [7, 8], dataset_id="t0-d0")
    save_datasets(store, tmp_path / "pools")
    back = load_datasets(tmp_path / "pools", data.vocab)
    assert back.digest() == store.digest()
    assert np.array_equal(back.get(0).train_rows, store.get(0).train_rows)
    assert load_datasets(tmp_path / "absent", data.vocab).tissues() == []
