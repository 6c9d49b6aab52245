import os

import numpy as np
import pytest

from conftest import make_store, random_spd
from nkscale.errors import CorruptBlockError, IncompleteKernelError
from nkscale.kernels.analytic import compute_kernel_matrix
from nkscale.kernels.layers import preset
from nkscale.store import blockfile
from nkscale.store.access import StoreKernel, assemble, assemble_prefix, matvec_from_store, read_block
from nkscale.store.compute import DataSource, compute_block, compute_kernel, init_store, parse_block_filter
from nkscale.store.manifest import COMPLETE, count_blocks, load_manifest, plan_blocks


# ---------------------------------------------------------------- planning


def test_plan_symmetric_grid():
    m = plan_blocks(12000, 12000, 5000, symmetric=True)
    assert m.grid == (3, 3)
    assert len(m.blocks) == 6
    assert all(b.block_row <= b.block_col for b in m.blocks)


def test_plan_ragged():
    m = plan_blocks(10, 7, 5)
    assert m.grid == (2, 2) and len(m.blocks) == 4
    assert [b.shape for b in m.blocks] == [(5, 5), (5, 2), (5, 5), (5, 2)]
    assert sum(r * c for r, c in (b.shape for b in m.blocks)) == 70


def test_plan_large_count():
    assert count_blocks(5_000_000, 5_000_000, 5000, True) == 500_500


def test_plan_errors():
    with pytest.raises(ValueError):
        plan_blocks(10, 9, 5, symmetric=True)
    with pytest.raises(ValueError):
        plan_blocks(10, 10, 0)


# ---------------------------------------------------------------- block files


def test_block_roundtrip_bit_exact(tmp_path, rng):
    a = rng.standard_normal((7, 3))
    path = tmp_path / "b.nkb"
    crc = blockfile.write_block_file(path, a)
    out, crc2 = blockfile.read_block_file(path)
    assert crc == crc2
    assert out.tobytes() == a.tobytes()
    assert path.stat().st_size == blockfile.file_size(7, 3)


def test_corrupt_byte_detected(tmp_path, rng):
    K = random_spd(12)
    m = make_store(K, 5, True, tmp_path)
    path = m.block_path(m.block(0, 1))
    raw = bytearray(path.read_bytes())
    raw[blockfile.HEADER_SIZE + 11] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptBlockError, match="r00000_c00001"):
        read_block(m, 0, 1)


def test_mirror_is_transpose(tmp_path):
    K = random_spd(12, seed=3)
    m = make_store(K, 5, True, tmp_path)
    np.testing.assert_array_equal(read_block(m, 2, 1), read_block(m, 1, 2).T)
    np.testing.assert_array_equal(read_block(m, 2, 1), K[10:12, 5:10])
    np.testing.assert_array_equal(assemble(m), K)


# ---------------------------------------------------------------- computation


def _data(n=30, seed=0):
    return DataSource(np.random.default_rng(seed).standard_normal((n, 6)))


def test_compute_matches_dense_and_is_idempotent(tmp_path):
    arch, data = preset("FC3"), _data()
    m = compute_kernel(tmp_path, arch, data, block_size=8)
    assert m.complete
    K = assemble(m)
    np.testing.assert_allclose(K, compute_kernel_matrix(arch, data.rows), rtol=1e-13)
    assert np.max(np.abs(read_block(m, 0, 0) - read_block(m, 0, 0).T)) <= 1e-12
    before = {b.path: m.block_path(b).read_bytes() for b in m.blocks}
    ref = m.block(1, 2)
    assert compute_block(m, ref, arch, data) is False
    # forcing a recompute gives the same bytes
    ref.status = "pending"
    m.block_path(ref).unlink()
    assert compute_block(m, ref, arch, data) is True
    after = {b.path: m.block_path(b).read_bytes() for b in m.blocks}
    assert before == after


def test_kill_mid_write_leaves_no_torn_file(tmp_path):
    arch, data = preset("FC3"), _data(12)
    m = init_store(tmp_path, arch, data, block_size=6)
    ref = m.block(0, 1)

    class Killed(Exception):
        pass

    def die(tmp):
        raise Killed

    with pytest.raises(Killed):
        compute_block(m, ref, arch, data, before_rename=die)
    assert not m.block_path(ref).exists()
    assert load_manifest(tmp_path).block(0, 1).status != COMPLETE
    m = load_manifest(tmp_path)
    assert compute_block(m, m.block(0, 1), arch, data)
    assert load_manifest(tmp_path).block(0, 1).status == COMPLETE


def test_kernel_id_guards_store(tmp_path):
    data = _data(10)
    init_store(tmp_path, preset("FC3"), data, block_size=5)
    with pytest.raises(ValueError):
        init_store(tmp_path, preset("FC3", "ntk"), data, block_size=5)


def _preempt_once(marker_dir):
    def fault(owner, n_done, tmp):
        flag = os.path.join(marker_dir, owner)
        if n_done == 1 and not os.path.exists(flag):
            open(flag, "w").close()
            os._exit(3)
    return fault


def test_preempted_workers_reproduce_single_shot(tmp_path):
    arch = preset("FC3")
    data = DataSource(np.random.default_rng(7).standard_normal((200, 5)))
    single = compute_kernel(tmp_path / "single", arch, data, block_size=34)
    marks = tmp_path / "marks"
    marks.mkdir()
    root = tmp_path / "sharded"
    fault = _preempt_once(str(marks))
    m = compute_kernel(root, arch, data, block_size=34, workers=4, fault=fault, ttl=0.5)
    restarts = 0
    while not m.complete and restarts < 5:
        m = compute_kernel(root, arch, data, block_size=34, workers=4, fault=fault, ttl=0.5)
        restarts += 1
    assert m.complete
    assert len(os.listdir(marks)) == 4  # every worker was killed once
    for ref in single.blocks:
        assert m.block_path(m.block(*ref.coords)).read_bytes() == single.block_path(ref).read_bytes()


def test_block_filter():
    f = parse_block_filter("1:")
    assert f(1, 3) and not f(0, 1)
    g = parse_block_filter("0:2")
    assert g(0, 2) and not g(0, 1)
    assert parse_block_filter(None) is None


# ---------------------------------------------------------------- streaming products


def test_identity_matvec(tmp_path, rng):
    m = make_store(np.eye(23), 7, True, tmp_path)
    v = rng.standard_normal(23)
    np.testing.assert_array_equal(matvec_from_store(m, v), v)


def test_matvec_block17(tmp_path, rng):
    K = random_spd(100, seed=1)
    m = make_store(K, 17, True, tmp_path)
    v = rng.standard_normal(100)
    y = matvec_from_store(m, v)
    assert np.linalg.norm(y - K @ v) / np.linalg.norm(K @ v) <= 1e-12


def test_multi_vector_linearity(tmp_path, rng):
    K = rng.standard_normal((40, 31))
    m = make_store(K, 9, False, tmp_path)
    V = rng.standard_normal((31, 10))
    Y = matvec_from_store(m, V)
    for t in range(10):
        np.testing.assert_allclose(Y[:, t], matvec_from_store(m, V[:, t]), rtol=1e-14, atol=1e-14)


def test_reader_count_does_not_change_bits(tmp_path, rng):
    K = random_spd(60, seed=5)
    m = make_store(K, 11, True, tmp_path)
    v = rng.standard_normal((60, 2))
    ys = [matvec_from_store(m, v, readers=r) for r in (1, 2, 7)]
    assert all(np.array_equal(ys[0], y) for y in ys[1:])


def test_pending_blocks_raise(tmp_path, rng):
    m = plan_blocks(10, 10, 5, symmetric=True)
    m.save(tmp_path)
    with pytest.raises(IncompleteKernelError):
        matvec_from_store(load_manifest(tmp_path), np.ones(10))


def test_prefix_and_store_kernel(tmp_path, rng):
    K = random_spd(30, seed=2)
    m = make_store(K, 8, True, tmp_path)
    np.testing.assert_array_equal(assemble_prefix(m, 13, 20), K[:13, :20])
    sk = StoreKernel(m, cache_blocks=2)
    np.testing.assert_array_equal(sk.row(17), K[17])
    np.testing.assert_array_equal(sk.diag(), np.diag(K))
    np.testing.assert_array_equal(sk.sub([3, 29], [0, 9, 16]), K[np.ix_([3, 29], [0, 9, 16])])
    assert sk.shape == (30, 30)


def test_storage_size(tmp_path):
    K = random_spd(20)
    m = make_store(K, 6, True, tmp_path)
    total = sum(m.block_path(b).stat().st_size for b in m.blocks)
    area = sum(r * c for r, c in (b.shape for b in m.blocks))
    assert total == 8 * area + len(m.blocks) * (blockfile.HEADER_SIZE + blockfile.TRAILER_SIZE)
