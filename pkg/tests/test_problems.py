import numpy as np
import pytest
from scipy import stats

from adunfold.problems import (Batch, BatchConfig, DimensionError, FormatError, ParameterError,
                               batch_stream, complex_to_real_stack, gen_matrix, gen_measurement,
                               gen_sparse_signal, make_batch, read_batch, realized_snr_db,
                               stack_vector, write_batch)


def test_gaussian_matrix_shape_and_unit_columns():
    M = gen_matrix("gaussian", 250, 500, 1)
    assert M.shape == (250, 500)
    assert np.max(np.abs(np.linalg.norm(M.entries, axis=0) - 1)) < 1e-12


def test_rademacher_entries_are_plus_minus_half_for_four_rows():
    M = gen_matrix("rademacher", 4, 4, 3)
    assert np.allclose(np.abs(M.entries), 0.5, atol=0, rtol=0) or np.all(np.abs(M.entries) == 0.5)
    assert np.max(np.abs(np.linalg.norm(M.entries, axis=0) - 1)) < 1e-12


def test_matrix_is_deterministic_per_seed():
    a = gen_matrix("gaussian", 7, 9, 42).entries
    b = gen_matrix("gaussian", 7, 9, 42).entries
    assert np.array_equal(a, b)
    assert not np.array_equal(a, gen_matrix("gaussian", 7, 9, 43).entries)


def test_qpsk_stacked_is_real_embedding_of_qpsk_symbols():
    M = gen_matrix("qpsk_stacked", 3, 5, 0, normalize=False).entries
    assert M.shape == (6, 10)
    C = M[:3, :5] + 1j * M[3:, :5]
    assert np.all(np.isin(np.round(C, 12), [1, -1, 1j, -1j]))
    assert np.array_equal(M, complex_to_real_stack(C.real, C.imag))


def test_bad_matrix_dimensions():
    with pytest.raises(DimensionError):
        gen_matrix("gaussian", 0, 5, 0)
    with pytest.raises(ParameterError):
        gen_matrix("toeplitz", 2, 5, 0)


def test_stack_scalar_examples():
    assert np.array_equal(complex_to_real_stack([[1]], [[0]]), [[1, 0], [0, 1]])
    assert np.array_equal(complex_to_real_stack([[0]], [[1]]), [[0, -1], [1, 0]])
    with pytest.raises(DimensionError):
        complex_to_real_stack(np.ones((2, 2)), np.ones((2, 3)))


def test_stacking_homomorphism(rng):
    worst = 0.0
    for _ in range(100):
        C = rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))
        z = rng.standard_normal(2) + 1j * rng.standard_normal(2)
        lhs = complex_to_real_stack(C.real, C.imag) @ stack_vector(z)
        worst = max(worst, np.max(np.abs(lhs - stack_vector(C @ z))))
    assert worst < 1e-10


def test_sparse_signal_range_and_norm():
    sig = gen_sparse_signal(500, 10, 100, 5)
    assert 10 <= sig.sparsity <= 100
    assert np.count_nonzero(sig.values) == sig.sparsity
    assert abs(np.linalg.norm(sig.values) - 1) < 1e-12


def test_sparse_signal_dense_edge():
    sig = gen_sparse_signal(5, 5, 5, 0)
    assert np.count_nonzero(sig.values) == 5
    assert abs(np.linalg.norm(sig.values) - 1) < 1e-12


def test_sparse_signal_empty_range():
    with pytest.raises(ParameterError):
        gen_sparse_signal(5, 4, 3, 0)


def test_sparsity_level_is_uniform():
    b = make_batch(BatchConfig(4, 20, 1, 10, batch_size=10_000, master_seed=8), 0)
    counts = np.bincount(b.sparsity, minlength=11)[1:]
    assert stats.chisquare(counts).pvalue > 0.01
    assert np.array_equal(np.count_nonzero(b.X, axis=1), b.sparsity)


def test_noiseless_measurement_is_exact():
    M = gen_matrix("gaussian", 6, 10, 0)
    sig = gen_sparse_signal(10, 2, 2, 1)
    inst = gen_measurement(M, sig)
    assert np.array_equal(inst.y, M.entries @ sig.values)


def test_per_sample_snr_is_exact():
    M = gen_matrix("gaussian", 30, 60, 0)
    sig = gen_sparse_signal(60, 4, 4, 2)
    inst = gen_measurement(M, sig, snr_db=20, seed=4)
    clean = M.entries @ sig.values
    snr = 10 * np.log10(np.sum(clean**2) / np.sum((inst.y - clean) ** 2))
    assert abs(snr - 20) < 1e-9


def test_batch_snr_is_exact_per_sample():
    b = make_batch(BatchConfig(16, 32, 1, 4, batch_size=50, snr_db=15.0), 0)
    assert np.max(np.abs(realized_snr_db(b) - 15)) < 1e-9


def test_zero_signal_with_snr_is_rejected():
    M = gen_matrix("gaussian", 4, 6, 0)
    from adunfold.problems import SparseSignal
    with pytest.raises(ParameterError):
        gen_measurement(M, SparseSignal(np.zeros(6), 0), snr_db=10)


def test_measurement_shape_mismatch():
    M = gen_matrix("gaussian", 4, 6, 0)
    from adunfold.problems import SparseSignal
    with pytest.raises(DimensionError):
        gen_measurement(M, SparseSignal(np.ones(5), 5))


def test_stream_counts_and_regeneration():
    cfg = BatchConfig(8, 16, 1, 3, batch_size=1000, n_batches=3, master_seed=2)
    batches = list(batch_stream(cfg))
    assert len(batches) == 3 and all(len(b) == 1000 for b in batches)
    alone = make_batch(cfg, 2)
    assert np.array_equal(alone.X, batches[2].X) and np.array_equal(alone.Y, batches[2].Y)


def test_master_seed_changes_first_batch():
    a = make_batch(BatchConfig(8, 16, 1, 3, batch_size=4, master_seed=1), 0)
    b = make_batch(BatchConfig(8, 16, 1, 3, batch_size=4, master_seed=2), 0)
    assert not np.array_equal(a.X, b.X)


def test_batch_config_validation():
    with pytest.raises(ParameterError):
        BatchConfig(4, 8, 0, 3)
    with pytest.raises(ParameterError):
        BatchConfig(4, 8, 2, 9)
    with pytest.raises(ParameterError):
        BatchConfig(4, 8, 1, 3, batch_size=0)
    with pytest.raises(ParameterError):
        BatchConfig(4, 8, 1, 3, signal_kind="banded")


def test_qpsk_batch_shapes_and_user_sparsity():
    cfg = BatchConfig(8, 16, 1, 4, batch_size=20, matrix_kind="qpsk_stacked")
    b = make_batch(cfg, 0)
    assert b.A.shape == (16, 32) and b.X.shape == (20, 32)
    users = np.count_nonzero(np.abs(b.X[:, :16]) + np.abs(b.X[:, 16:]), axis=1)
    assert np.array_equal(users, b.sparsity)
    assert np.allclose(b.Y, b.X @ b.A.T, atol=1e-12)


def test_clustered_signals_are_runs_of_adjacent_bins():
    cfg = BatchConfig(8, 36, 1, 1, batch_size=30, signal_kind="clustered", cluster_width=3)
    b = make_batch(cfg, 0)
    for x in b.X:
        idx = np.flatnonzero(x)
        assert idx.size == 3
        # one cluster: three circularly consecutive bins
        assert sorted((idx - idx[0]) % 36) in ([0, 1, 2], [0, 1, 35], [0, 34, 35])


def test_dataset_round_trip(tmp_path):
    for cfg in (BatchConfig(5, 9, 1, 3, batch_size=4, snr_db=12.5),
                BatchConfig(5, 9, 1, 3, batch_size=4),
                BatchConfig(3, 4, 1, 2, batch_size=2, matrix_kind="qpsk_stacked")):
        b = make_batch(cfg, 1)
        write_batch(tmp_path / "b.adun", b)
        r = read_batch(tmp_path / "b.adun")
        assert np.array_equal(r.A, b.A) and np.array_equal(r.X, b.X) and np.array_equal(r.Y, b.Y)
        assert r.snr_db == b.snr_db and r.matrix.kind == b.matrix.kind
        assert np.array_equal(r.sparsity, b.sparsity)


def test_dataset_header_layout(tmp_path):
    import struct
    b = make_batch(BatchConfig(2, 3, 1, 1, batch_size=1, snr_db=-3.25), 0)
    write_batch(tmp_path / "b.adun", b)
    raw = (tmp_path / "b.adun").read_bytes()
    magic, version, n, m, size, snr, kind = struct.unpack_from("<4sIIIIiB", raw)
    assert (magic, version, n, m, size, snr, kind) == (b"ADUN", 1, 2, 3, 1, -325, 0)
    assert len(raw) == struct.calcsize("<4sIIIIiB") + 8 * (2 * 3 + 3 + 2)


def test_corrupt_dataset_files(tmp_path):
    (tmp_path / "x.adun").write_bytes(b"NOPE" + bytes(30))
    with pytest.raises(FormatError):
        read_batch(tmp_path / "x.adun")
    b = make_batch(BatchConfig(2, 3, 1, 1, batch_size=1), 0)
    write_batch(tmp_path / "y.adun", b)
    raw = (tmp_path / "y.adun").read_bytes()
    (tmp_path / "y.adun").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        read_batch(tmp_path / "y.adun")


def test_subset_and_instance():
    b = make_batch(BatchConfig(4, 8, 1, 3, batch_size=6), 0)
    sub = b.subset(b.sparsity == b.sparsity[0])
    assert isinstance(sub, Batch) and np.all(sub.sparsity == b.sparsity[0])
    inst = b.instance(2)
    assert np.array_equal(inst.x, b.X[2]) and np.array_equal(inst.y, b.Y[2])
