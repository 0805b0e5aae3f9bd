import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streambridge.core import StreamRecord
from streambridge.dmd import (
    DegenerateWindow,
    InsufficientSnapshots,
    SnapshotWindow,
    compute_dmd,
    stability_metric,
    update_window,
)


def trajectory(A, x1, m):
    cols = [np.asarray(x1, dtype=float)]
    for _ in range(m - 1):
        cols.append(A @ cols[-1])
    return np.column_stack(cols)


def mp_eigs(A):
    """Eigenvalues from mpmath at 40 digits, independent of LAPACK."""
    with mpmath.workdps(40):
        E, _ = mpmath.eig(mpmath.matrix(A.tolist()))
        return [complex(e) for e in E]


def match_cost(got, want):
    # brute force over permutations; sizes here are <= 5
    assert len(got) == len(want)
    return min(
        sum(abs(g - want[i]) for g, i in zip(got, perm))
        for perm in itertools.permutations(range(len(want)))
    )


def test_diag_spectrum_and_metric():
    A = np.diag([0.9, 0.5])
    res = compute_dmd(trajectory(A, [1, 1], 8))
    assert res.rank == 2
    assert match_cost(res.eigenvalues, mp_eigs(A)) < 1e-8
    assert res.stability_metric == pytest.approx(0.13, abs=1e-8)
    assert res.eigenvalues[0].real > res.eigenvalues[1].real


def test_rotation_on_unit_circle():
    t = math.pi / 4
    A = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    res = compute_dmd(trajectory(A, [1, 0], 8))
    assert all(abs(abs(z) - 1) < 1e-10 for z in res.eigenvalues)
    assert res.stability_metric <= 1e-10
    # conjugate pair, positive imaginary part first
    assert res.eigenvalues[0].imag > 0 > res.eigenvalues[1].imag


def test_diffusion_closed_form():
    mu = 0.1
    T = np.eye(3) + mu * (np.diag([-2.0] * 3) + np.diag([1.0] * 2, 1) + np.diag([1.0] * 2, -1))
    closed = [1 - 4 * mu * math.sin(j * math.pi / 8) ** 2 for j in (1, 2, 3)]
    assert closed == pytest.approx([0.94142, 0.8, 0.65858], abs=1e-5)
    res = compute_dmd(trajectory(T, [0.3, 1.0, -0.4], 8))
    assert match_cost(res.eigenvalues, closed) < 1e-8
    assert [z.real for z in res.eigenvalues] == pytest.approx([0.94142, 0.8, 0.65858], abs=1e-5)


@pytest.mark.parametrize("c", [1.0, -2.5, 1e-6, 3e4])
def test_constant_snapshots(c):
    v = np.array([1.0, -2.0, 0.5, 4.0])
    res = compute_dmd(np.column_stack([c * v] * 5))
    assert res.rank == 1
    assert res.eigenvalues[0] == pytest.approx(1.0, abs=1e-12)
    assert res.stability_metric <= 1e-12


def test_metric_examples():
    assert stability_metric([1]) == 0
    assert stability_metric([1j]) == 0
    assert stability_metric([0.9, 0.5]) == pytest.approx(0.13, abs=1e-15)
    # independent evaluation at high precision
    with mpmath.workdps(30):
        ref = ((mpmath.mpf("0.9") - 1) ** 2 + (mpmath.mpf("0.5") - 1) ** 2) / 2
    assert abs(stability_metric([0.9, 0.5]) - float(ref)) < 1e-15
    with pytest.raises(ValueError):
        stability_metric([])


def test_errors():
    with pytest.raises(InsufficientSnapshots):
        compute_dmd(np.ones((3, 1)))
    with pytest.raises(DegenerateWindow):
        compute_dmd(np.zeros((3, 4)))
    bad = np.ones((2, 3))
    bad[0, 1] = np.nan
    with pytest.raises(ValueError):
        compute_dmd(bad)


def test_rank_bounds_and_truncation():
    rng = np.random.default_rng(3)
    data = rng.standard_normal((10, 4))
    assert compute_dmd(data).rank == 3
    assert compute_dmd(data, r_max=2).rank == 2
    data = rng.standard_normal((2, 9))
    res = compute_dmd(data)
    assert res.rank == 2 and len(res.singular_values) == 2


def random_diagonalizable(rng, n):
    """Real A with a known spectrum: real eigenvalues and conjugate pairs."""
    eig_blocks, lams = [], []
    i = 0
    while i < n:
        if n - i >= 2 and rng.random() < 0.4:
            r, th = rng.uniform(0.6, 1.05), rng.uniform(0.3, 2.5)
            a, b = r * math.cos(th), r * math.sin(th)
            eig_blocks.append(np.array([[a, -b], [b, a]]))
            lams += [complex(a, b), complex(a, -b)]
            i += 2
        else:
            lam = rng.uniform(0.5, 1.05) * rng.choice([-1, 1])
            eig_blocks.append(np.array([[lam]]))
            lams.append(complex(lam))
            i += 1
    D = np.zeros((n, n))
    k = 0
    for blk in eig_blocks:
        s = blk.shape[0]
        D[k:k + s, k:k + s] = blk
        k += s
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    V = Q + 0.3 * rng.standard_normal((n, n))
    return V @ D @ np.linalg.inv(V), lams


def _separated(lams, gap=0.05):
    return all(abs(a - b) > gap for a, b in itertools.combinations(lams, 2))


def test_spectrum_recovery_random_systems():
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < 100:
        n = int(rng.integers(1, 6))
        A, lams = random_diagonalizable(rng, n)
        if not _separated(lams):
            continue
        oracle = mp_eigs(A)
        assert match_cost(oracle, lams) < 1e-9
        res = compute_dmd(trajectory(A, rng.standard_normal(n), n + 4))
        assert res.rank == n
        assert match_cost(res.eigenvalues, oracle) < 1e-8
        checked += 1


def test_partial_excitation_recovers_excited_subset():
    A = np.diag([0.95, 0.7, 0.4, -0.6])
    x1 = np.array([1.0, 0.0, 2.0, 0.0])
    res = compute_dmd(trajectory(A, x1, 6))
    assert res.rank == 2
    assert match_cost(res.eigenvalues, [0.95, 0.4]) < 1e-8


def test_scale_invariance_random_systems():
    rng = np.random.default_rng(77)
    for _ in range(100):
        n = int(rng.integers(1, 6))
        A, _ = random_diagonalizable(rng, n)
        data = trajectory(A, rng.standard_normal(n), n + 4)
        c = float(rng.choice([-1, 1]) * 10 ** rng.uniform(-3, 3))
        a, b = compute_dmd(data), compute_dmd(c * data)
        assert a.rank == b.rank
        assert match_cost(a.eigenvalues, b.eigenvalues) < 1e-10
        assert abs(a.stability_metric - b.stability_metric) < 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_nonneg_and_zero_iff_unit(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    data = rng.standard_normal((n, int(rng.integers(2, 10))))
    res = compute_dmd(data)
    assert res.stability_metric >= 0
    on_circle = all(abs(abs(z) - 1) < 1e-9 for z in res.eigenvalues)
    assert (res.stability_metric < 1e-15) <= on_circle
    assert res.stability_metric == pytest.approx(
        sum((abs(z) - 1) ** 2 for z in res.eigenvalues) / res.rank, rel=1e-12, abs=1e-15
    )


def test_deterministic_bits():
    data = np.random.default_rng(5).standard_normal((6, 9))
    a, b = compute_dmd(data), compute_dmd(data.copy())
    assert np.array(a.eigenvalues).tobytes() == np.array(b.eigenvalues).tobytes()


def test_window_eviction_and_order():
    w = SnapshotWindow(1, capacity=2)
    for s in (1, 2, 3):
        w.append(s, [float(s)])
    assert w.steps == [2, 3]
    with pytest.raises(ValueError):
        w.append(3, [1.0])
    with pytest.raises(ValueError):
        w.append(4, [1.0, 2.0])
    update_window(w, StreamRecord("p:0", 9, [9.0]))
    assert w.steps == [3, 9]
    np.testing.assert_array_equal(w.matrix(), [[3.0, 9.0]])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.lists(st.integers(-3, 20), max_size=40))
def test_window_matches_reference_list(cap, steps):
    w = SnapshotWindow(2, capacity=cap)
    ref = []
    for s in steps:
        if ref and s <= ref[-1]:
            with pytest.raises(ValueError):
                w.append(s, [s, s])
            continue
        w.append(s, [s, -s])
        ref = (ref + [s])[-cap:]
    assert w.steps == ref
    assert all(a < b for a, b in zip(w.steps, w.steps[1:]))
