import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from celltyper.data import (
    RESERVED_CAPACITY,
    UNKNOWN,
    CellMetadata,
    GeneExpressionMatrix,
    LabelVocabulary,
    LoadedData,
    SynthesisConfig,
    filter_qc,
    load_matrix,
    normalize,
    read_metadata,
    stratified_split,
    subset_loaded,
    synthesize,
    write_matrix,
)
from celltyper.errors import CapacityError, DataError


def _loaded(values, cell_types, tissues, vocab=None):
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    vocab = vocab or LabelVocabulary([f"c{i}" for i in range(max(cell_types) + 1)],
                                     [f"t{i}" for i in range(max(tissues) + 1)])
    meta = [CellMetadata(f"cell{i}", cell_types[i], tissues[i], "b0") for i in range(n)]
    mat = GeneExpressionMatrix(values, [f"g{j}" for j in range(values.shape[1])],
                               [m.cell_id for m in meta])
    return LoadedData(mat, meta, vocab)


# ---------------------------------------------------------------------------
# vocabulary

def test_vocab_first_appearance_order_and_roundtrip():
    v = LabelVocabulary()
    assert v.add_cell_type("b-cell") == 0
    assert v.add_cell_type("t-cell") == 1
    assert v.add_cell_type("b-cell") == 0
    v.add_tissue("kidney")
    w = LabelVocabulary.from_dict(v.to_dict())
    assert w.cell_types == ["b-cell", "t-cell"]
    assert w.tissue_index("kidney") == 0


def test_vocab_reserves_unknown_and_enforces_capacity():
    v = LabelVocabulary(reserved_capacity=2)
    with pytest.raises(DataError):
        v.add_cell_type("unknown")
    assert v.cell_type_index("unknown") == UNKNOWN
    assert v.cell_type_name(UNKNOWN) == "unknown"
    v.add_cell_type("a")
    v.add_cell_type("b")
    with pytest.raises(CapacityError):
        v.add_cell_type("c")
    assert RESERVED_CAPACITY == 200


def test_vocab_rejects_unseen_names():
    v = LabelVocabulary(["a"], ["t"])
    with pytest.raises(DataError):
        v.cell_type_index("nope")
    with pytest.raises(DataError):
        v.tissue_index("nope")


# ---------------------------------------------------------------------------
# matrix container

def test_matrix_validate_catches_misalignment_and_duplicates():
    good = GeneExpressionMatrix(np.ones((2, 3)), ["g0", "g1", "g2"], ["a", "b"])
    good.validate()
    with pytest.raises(DataError):
        GeneExpressionMatrix(np.ones((2, 3)), ["g0"], ["a", "b"]).validate()
    with pytest.raises(DataError):
        GeneExpressionMatrix(np.ones((2, 3)), ["g0", "g1", "g2"], ["a", "a"]).validate()


def test_matrix_subset_and_digest():
    m = GeneExpressionMatrix(np.arange(12, dtype=np.float64).reshape(3, 4),
                             [f"g{j}" for j in range(4)], ["a", "b", "c"])
    s = m.subset_cells([2, 0])
    assert s.cell_ids == ["c", "a"]
    assert np.array_equal(s.to_dense()[0], m.to_dense()[2])
    g = m.subset_genes([1, 3])
    assert g.gene_names == ["g1", "g3"]
    assert m.digest() == m.digest()
    assert m.digest() != s.digest()


def test_sparse_and_dense_agree():
    dense = np.array([[0.0, 2.0, 0.0], [1.0, 0.0, 3.0]])
    a = GeneExpressionMatrix(dense, ["g0", "g1", "g2"], ["a", "b"])
    b = GeneExpressionMatrix(sp.csr_matrix(dense), ["g0", "g1", "g2"], ["a", "b"])
    assert np.array_equal(a.to_dense(), b.to_dense())


# ---------------------------------------------------------------------------
# io round trips

def test_dense_roundtrip_is_bit_exact(tmp_path):
    data = _loaded(np.random.default_rng(0).gamma(2.0, size=(5, 4)),
                   [0, 1, 0, 1, 0], [0, 0, 1, 1, 0])
    path = tmp_path / "m.csv"
    write_matrix(data, path)
    back = load_matrix(path)
    assert np.array_equal(back.matrix.to_dense(), data.matrix.to_dense())
    assert back.matrix.gene_names == data.matrix.gene_names
    assert [m.cell_id for m in back.metadata] == [m.cell_id for m in data.metadata]
    assert back.vocab.cell_types == ["c0", "c1"]


def test_sparse_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    dense = rng.poisson(0.8, size=(6, 5)).astype(np.float64)
    data = _loaded(dense, [0] * 6, [0] * 6)
    path = tmp_path / "m.mtx"
    write_matrix(data, path, fmt="sparse-mtx")
    back = load_matrix(path)
    assert sp.issparse(back.matrix.values)
    assert np.array_equal(back.matrix.to_dense(), dense)


def test_load_requires_metadata_sidecar(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("cell_id,g0\na,1.0\n")
    with pytest.raises(DataError, match="sidecar"):
        load_matrix(path)


def test_metadata_respects_frozen_vocab(tmp_path):
    p = tmp_path / "x.meta.csv"
    p.write_text("cell_id,cell_type,tissue,batch\na,new-type,t0,b0\n")
    vocab = LabelVocabulary(["old"], ["t0"])
    with pytest.raises(DataError):
        read_metadata(p, vocab, extend=False)
    meta, vocab = read_metadata(p, vocab, extend=True)
    assert meta[0].cell_type == vocab.cell_type_index("new-type")


def test_metadata_unknown_label_maps_to_sentinel(tmp_path):
    p = tmp_path / "x.meta.csv"
    p.write_text("cell_id,cell_type,tissue,batch\na,unknown,unknown,b0\n")
    meta, _ = read_metadata(p)
    assert meta[0].cell_type == UNKNOWN
    assert meta[0].tissue == UNKNOWN


# ---------------------------------------------------------------------------
# preprocessing

def test_normalize_matches_hand_computation():
    m = GeneExpressionMatrix(np.array([[1.0, 3.0], [5.0, 5.0]]), ["g0", "g1"], ["a", "b"])
    out = normalize(m, target_sum=4.0, log1p=False).to_dense()
    assert np.allclose(out, [[1.0, 3.0], [2.0, 2.0]], atol=1e-12)
    logged = normalize(m, target_sum=4.0, log1p=True).to_dense()
    assert np.allclose(logged, np.log1p([[1.0, 3.0], [2.0, 2.0]]), atol=1e-12)


def test_normalize_rejects_zero_rows_and_bad_target():
    m = GeneExpressionMatrix(np.array([[0.0, 0.0]]), ["g0", "g1"], ["dead"])
    with pytest.raises(DataError, match="dead"):
        normalize(m)
    with pytest.raises(DataError):
        normalize(m, target_sum=0.0)


def test_normalize_sparse_equals_dense():
    rng = np.random.default_rng(2)
    dense = rng.poisson(1.0, size=(8, 6)).astype(np.float64) + 0.1
    a = normalize(GeneExpressionMatrix(dense, [f"g{j}" for j in range(6)],
                                       [f"c{i}" for i in range(8)])).to_dense()
    b = normalize(GeneExpressionMatrix(sp.csr_matrix(dense), [f"g{j}" for j in range(6)],
                                       [f"c{i}" for i in range(8)])).to_dense()
    assert np.allclose(a, b, atol=1e-12)


def test_filter_qc_drops_cells_then_genes():
    values = np.array([
        [1.0, 0.0, 2.0],
        [0.0, 0.0, 0.0],   # dropped: no genes
        [3.0, 0.0, 1.0],
    ])
    data = _loaded(values, [0, 0, 0], [0, 0, 0])
    mat, meta = filter_qc(data.matrix, data.metadata,
                          min_genes_per_cell=1, min_cells_per_gene=2)
    assert [m.cell_id for m in meta] == ["cell0", "cell2"]
    # g1 never expressed in survivors
    assert mat.gene_names == ["g0", "g2"]


def test_filter_qc_refuses_to_empty_the_data():
    data = _loaded(np.zeros((2, 2)) + 0.0, [0, 0], [0, 0])
    with pytest.raises(DataError):
        filter_qc(data.matrix, data.metadata, min_genes_per_cell=1)


# ---------------------------------------------------------------------------
# splitting

def test_split_is_a_partition_with_811_sizes():
    meta = [CellMetadata(f"c{i}", i % 2, 0, "b") for i in range(200)]
    split = stratified_split(meta, (8, 1, 1), seed=5)
    allidx = np.concatenate([split.train, split.val, split.test])
    assert np.array_equal(np.sort(allidx), np.arange(200))
    assert split.train.size == 160 and split.val.size == 20 and split.test.size == 20
    labels = np.asarray([m.cell_type for m in meta])
    # stratified: each class contributes proportionally
    assert np.sum(labels[split.train] == 0) == 80


def test_split_keeps_small_classes_everywhere_and_rejects_tiny():
    meta = [CellMetadata(f"c{i}", 0, 0, "b") for i in range(4)]
    split = stratified_split(meta, (8, 1, 1), seed=0)
    assert split.val.size >= 1 and split.test.size >= 1
    with pytest.raises(DataError):
        stratified_split([CellMetadata("a", 0, 0, "b"), CellMetadata("b", 0, 0, "b")])


def test_split_is_seed_deterministic():
    meta = [CellMetadata(f"c{i}", i % 3, 0, "b") for i in range(60)]
    a = stratified_split(meta, seed=9)
    b = stratified_split(meta, seed=9)
    c = stratified_split(meta, seed=10)
    assert np.array_equal(a.train, b.train)
    assert not np.array_equal(a.train, c.train)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=3, max_value=40), st.integers(min_value=1, max_value=4),
       st.integers(min_value=0, max_value=1000))
def test_split_partition_property(per_class, n_classes, seed):
    meta = [CellMetadata(f"c{c}-{i}", c, 0, "b")
            for c in range(n_classes) for i in range(per_class)]
    split = stratified_split(meta, seed=seed)
    allidx = np.concatenate([split.train, split.val, split.test])
    assert np.array_equal(np.sort(allidx), np.arange(len(meta)))
    assert split.train.size > 0 and split.val.size > 0 and split.test.size > 0


# ---------------------------------------------------------------------------
# synthesis

def _small_cfg(seed=3):
    return SynthesisConfig(tissues=2, classes_per_tissue=2, cells_per_class=10,
                           genes=30, marker_genes_per_class=3, marker_strength=7.0,
                           baseline_mean=1.0, noise_level=0.4, batches=2,
                           batch_shift=0.1, seed=seed)


def test_synthesize_shape_names_and_determinism():
    data = synthesize(_small_cfg())
    again = synthesize(_small_cfg())
    other = synthesize(_small_cfg(seed=4))
    assert data.matrix.n_cells == 40 and data.matrix.n_genes == 30
    assert data.vocab.tissues == ["tissue0", "tissue1"]
    assert data.vocab.cell_types == [f"type{c:02d}" for c in range(4)]
    assert np.array_equal(data.matrix.to_dense(), again.matrix.to_dense())
    assert not np.array_equal(data.matrix.to_dense(), other.matrix.to_dense())
    assert all(v >= 0 for v in data.matrix.to_dense().ravel())


def test_synthesize_markers_lift_their_class():
    data = synthesize(_small_cfg())
    dense = data.matrix.to_dense()
    labels = data.labels()
    # class 0 owns the first marker block; its mean there dominates others'
    block = dense[:, :3].mean(axis=1)
    assert block[labels == 0].mean() > 3 * block[labels != 0].mean()


def test_subset_loaded_keeps_alignment():
    data = synthesize(_small_cfg())
    sub = subset_loaded(data, [5, 2])
    assert sub.metadata[0].cell_id == data.metadata[5].cell_id
    assert np.array_equal(sub.matrix.to_dense()[1], data.matrix.to_dense()[2])
