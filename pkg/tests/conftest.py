import numpy as np
import pytest

from nkscale.kernels.analytic import KernelState
from nkscale.store import blockfile
from nkscale.store.manifest import COMPLETE, load_manifest, plan_blocks


def scalar_state(s11, s22, s12, ntk=0.0):
    """One-pair state without spatial structure."""
    c = np.array([[float(s12)]])
    return KernelState(c, np.full_like(c, ntk), np.array([float(s11)]), np.array([float(s22)]), (), ())


def spatial_state(sigma, ntk=None):
    """One-pair state where both inputs share the P x P covariance ``sigma``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    p = sigma.shape[0]
    cross = sigma.reshape(1, 1, p, p)
    theta = np.zeros_like(cross) if ntk is None else np.asarray(ntk, dtype=np.float64).reshape(1, 1, p, p)
    self_ = sigma.reshape(1, p, p)
    return KernelState(cross.copy(), theta, self_.copy(), self_.copy(), (p,), (p,))


def make_store(K, block_size, symmetric, root):
    """Write a dense matrix into a complete block store without a kernel."""
    m = plan_blocks(K.shape[0], K.shape[1], block_size, symmetric)
    m.save(root)
    for ref in m.blocks:
        (r0, r1), (c0, c1) = ref.row_range, ref.col_range
        crc = blockfile.write_block_file(m.block_path(ref), K[r0:r1, c0:c1])
        ref.checksum = f"{crc:016x}"
        ref.status = COMPLETE
    m.save(root)
    return load_manifest(root)


def random_spd(n, seed=0, ridge=0.1):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    return a @ a.T / n + ridge * np.eye(n)


def naive_spearman(x, y):
    def ranks(a):
        # average rank = 1 + (#smaller) + (#equal - 1) / 2, quadratic time
        return np.array([1 + np.sum(a < v) + (np.sum(a == v) - 1) / 2 for v in a])

    rx, ry = ranks(x), ranks(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    return float(np.sum(rx * ry) / np.sqrt(np.sum(rx**2) * np.sum(ry**2)))


def naive_ap(scores, pos):
    """Enumerate every distinct threshold; AP = sum over thresholds of delta recall * precision."""
    total = pos.sum()
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        sel = scores >= t
        tp = np.sum(pos & sel)
        recall = tp / total
        ap += (recall - prev_recall) * tp / sel.sum()
        prev_recall = recall
    return ap


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance report

_VERDICTS = []


@pytest.fixture
def accept():
    """Record one verdict line per acceptance criterion; printed after the run."""

    def record(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
        _VERDICTS.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
