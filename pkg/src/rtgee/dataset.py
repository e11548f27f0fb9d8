"""Long-format longitudinal data container.

Subjects carry a response vector, a covariate matrix, and integer positions
into a shared global time grid.  Solver hot paths run over groups of
subjects that share the same observation-time pattern, so the container
caches a grouped (stacked) view.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class SubjectGroup:
    """Subjects sharing one observation-time pattern, stacked."""

    times: tuple          # global grid positions, length m
    subject_idx: np.ndarray  # indices into the dataset's subject order
    X: np.ndarray            # (n_g, m, p)
    y: np.ndarray            # (n_g, m)


@dataclass(eq=False)
class LongitudinalDataset:
    """Immutable-by-convention collection of subjects.

    ``time_index[i]`` maps subject i's observations into the global grid
    ``time_values`` (sorted unique observation times).
    """

    subject_ids: list
    y: list
    X: list
    time_index: list
    covariate_names: list
    time_values: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.subject_ids)
        if not (len(self.y) == len(self.X) == len(self.time_index) == n):
            raise ValueError("per-subject fields have mismatched lengths")
        if n == 0:
            raise ValueError("dataset has no subjects")
        p = self.X[0].shape[1]
        grid = len(self.time_values) if self.time_values else None
        for i in range(n):
            y_i = np.asarray(self.y[i], dtype=float)
            X_i = np.asarray(self.X[i], dtype=float)
            t_i = np.asarray(self.time_index[i], dtype=int)
            if y_i.ndim != 1 or X_i.ndim != 2 or X_i.shape != (y_i.size, p):
                raise ValueError(f"subject {self.subject_ids[i]!r}: shape mismatch")
            if t_i.shape != y_i.shape:
                raise ValueError(f"subject {self.subject_ids[i]!r}: time index shape mismatch")
            if np.any(np.diff(t_i) <= 0):
                raise ValueError(
                    f"subject {self.subject_ids[i]!r}: time indices must be "
                    "strictly increasing (duplicates are rejected upstream)"
                )
            if t_i.size and (t_i[0] < 0 or (grid is not None and t_i[-1] >= grid)):
                raise ValueError(f"subject {self.subject_ids[i]!r}: time index outside grid")
            self.y[i], self.X[i], self.time_index[i] = y_i, X_i, t_i
        if not self.time_values:
            t_max = max(int(t[-1]) for t in self.time_index if t.size)
            self.time_values = list(range(t_max + 1))

    @property
    def n(self) -> int:
        return len(self.subject_ids)

    @property
    def p(self) -> int:
        return self.X[0].shape[1]

    @property
    def n_times(self) -> int:
        return len(self.time_values)

    @property
    def n_obs(self) -> int:
        return sum(y_i.size for y_i in self.y)

    @property
    def m(self) -> np.ndarray:
        return np.array([y_i.size for y_i in self.y])

    @cached_property
    def stacked(self):
        """(X_rows, y_rows) with every observation stacked row-wise."""
        return np.vstack(self.X), np.concatenate(self.y)

    @cached_property
    def groups(self) -> list:
        """Subjects grouped by identical time pattern, stacked into 3-D arrays."""
        by_pattern: dict = {}
        for i, t_i in enumerate(self.time_index):
            by_pattern.setdefault(tuple(t_i.tolist()), []).append(i)
        out = []
        for times, idx in sorted(by_pattern.items()):
            idx = np.array(idx)
            out.append(
                SubjectGroup(
                    times=times,
                    subject_idx=idx,
                    X=np.stack([self.X[i] for i in idx]),
                    y=np.stack([self.y[i] for i in idx]),
                )
            )
        return out

    def subset(self, keep) -> "LongitudinalDataset":
        """New dataset with the selected subjects (same global grid)."""
        keep = list(keep)
        return LongitudinalDataset(
            subject_ids=[self.subject_ids[i] for i in keep],
            y=[self.y[i].copy() for i in keep],
            X=[self.X[i].copy() for i in keep],
            time_index=[self.time_index[i].copy() for i in keep],
            covariate_names=list(self.covariate_names),
            time_values=list(self.time_values),
        )

    def drop_subject(self, i: int) -> "LongitudinalDataset":
        return self.subset([k for k in range(self.n) if k != i])


def from_subject_arrays(y, X, time_index=None, subject_ids=None,
                        covariate_names=None, time_values=None) -> LongitudinalDataset:
    """Build a dataset from per-subject arrays.

    When ``time_index`` is omitted, subject i is assumed to occupy grid
    positions 0..m_i-1.
    """
    n = len(y)
    if time_index is None:
        time_index = [np.arange(len(np.asarray(y_i))) for y_i in y]
    if subject_ids is None:
        subject_ids = [str(i) for i in range(n)]
    if covariate_names is None:
        p = np.asarray(X[0]).shape[1]
        covariate_names = [f"x{j + 1}" for j in range(p)]
    if time_values is None:
        t_max = max(int(np.asarray(t)[-1]) for t in time_index)
        time_values = list(range(t_max + 1))
    return LongitudinalDataset(
        subject_ids=list(subject_ids),
        y=[np.asarray(v, dtype=float) for v in y],
        X=[np.asarray(v, dtype=float) for v in X],
        time_index=[np.asarray(t, dtype=int) for t in time_index],
        covariate_names=list(covariate_names),
        time_values=list(time_values),
    )
