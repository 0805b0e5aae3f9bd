"""Exact dynamic mode decomposition over a sliding window of snapshots."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_WINDOW = 16
DEFAULT_SVD_TOL = 1e-10


class DmdError(ValueError):
    pass


class InsufficientSnapshots(DmdError):
    pass


class DegenerateWindow(DmdError):
    pass


class SnapshotWindow:
    """Bounded, step-ordered buffer of snapshots for one stream.

    Once more than ``capacity`` snapshots have been added the oldest is
    evicted.
    """

    def __init__(self, n: int, capacity: int = DEFAULT_WINDOW):
        if n < 1:
            raise ValueError("state dimension must be >= 1")
        if capacity < 2:
            raise ValueError("window capacity must be >= 2")
        self.n = n
        self.capacity = capacity
        self._steps: deque[int] = deque()
        self._snaps: deque[np.ndarray] = deque()

    def __len__(self):
        return len(self._steps)

    @property
    def steps(self) -> list[int]:
        return list(self._steps)

    @property
    def last_step(self) -> int | None:
        return self._steps[-1] if self._steps else None

    def append(self, step: int, values) -> None:
        vec = np.array(values, dtype=np.float64).reshape(-1)
        if vec.size != self.n:
            raise ValueError(f"snapshot has {vec.size} values, window expects {self.n}")
        if self._steps and step <= self._steps[-1]:
            raise ValueError(f"step {step} does not follow last step {self._steps[-1]}")
        self._steps.append(step)
        self._snaps.append(vec)
        while len(self._steps) > self.capacity:
            self._steps.popleft()
            self._snaps.popleft()

    def matrix(self) -> np.ndarray:
        """Snapshots as columns, shape ``(n, len(self))``."""
        if not self._snaps:
            return np.empty((self.n, 0))
        return np.column_stack(list(self._snaps))

    def copy(self) -> "SnapshotWindow":
        dup = SnapshotWindow(self.n, self.capacity)
        dup._steps = deque(self._steps)
        dup._snaps = deque(self._snaps)
        return dup

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[int, Sequence[float]]], capacity: int | None = None):
        rows = list(rows)
        if not rows:
            raise ValueError("no snapshots")
        n = len(rows[0][1])
        window = cls(n, capacity or max(2, len(rows)))
        for step, values in rows:
            window.append(step, values)
        return window


def update_window(window: SnapshotWindow, record) -> SnapshotWindow:
    window.append(record.step, record.payload)
    return window


@dataclass(frozen=True)
class DmdResult:
    rank: int
    eigenvalues: tuple[complex, ...]
    stability_metric: float
    singular_values: tuple[float, ...]


def stability_metric(eigenvalues: Sequence[complex]) -> float:
    """Mean squared radial distance of the eigenvalues from the unit circle."""
    if len(eigenvalues) == 0:
        raise ValueError("stability metric needs at least one eigenvalue")
    return math.fsum((abs(lam) - 1.0) ** 2 for lam in eigenvalues) / len(eigenvalues)


def _order(eigs: np.ndarray) -> np.ndarray:
    # descending modulus, then descending real part, then descending imaginary part
    keys = np.lexsort((-eigs.imag, -eigs.real, -np.abs(eigs)))
    return eigs[keys]


def compute_dmd(
    snapshots,
    svd_tol: float = DEFAULT_SVD_TOL,
    r_max: int | None = None,
) -> DmdResult:
    """Run exact DMD on a window (or an ``(n, m)`` column-snapshot matrix)."""
    data = snapshots.matrix() if isinstance(snapshots, SnapshotWindow) else np.asarray(
        snapshots, dtype=np.float64
    )
    if data.ndim != 2:
        raise ValueError("snapshot matrix must be two-dimensional")
    m = data.shape[1]
    if m < 2:
        raise InsufficientSnapshots(f"DMD needs at least 2 snapshots, got {m}")
    if not np.all(np.isfinite(data)):
        raise ValueError("snapshots contain non-finite values")

    X, Xp = data[:, :-1], data[:, 1:]
    U, s, Vh = np.linalg.svd(X, full_matrices=False)
    if s[0] == 0.0:
        raise DegenerateWindow("all snapshots are zero")
    r = int(np.count_nonzero(s > svd_tol * s[0]))
    if r_max is not None:
        r = min(r, r_max)
    if r < 1:
        raise DegenerateWindow("no singular value above tolerance")

    Ur, sr, Vr = U[:, :r], s[:r], Vh[:r].conj().T
    atilde = (Ur.conj().T @ Xp @ Vr) / sr
    eigs = _order(np.linalg.eigvals(atilde).astype(np.complex128))
    return DmdResult(
        rank=r,
        eigenvalues=tuple(complex(z) for z in eigs),
        stability_metric=stability_metric(eigs),
        singular_values=tuple(float(x) for x in sr),
    )
