"""Dense high-dimensional point storage with stable ids.

Rows are recycled through a free list so downstream row-aligned state
(similarity rows, embedding arrays) stays valid for live ids without
compaction. Ids are never reused.
"""

from __future__ import annotations

import numpy as np

_INITIAL_CAPACITY = 64


class PointStore:
    """N x D coordinate store keyed by stable integer ids."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dimensionality must be >= 1")
        self.dim = int(dim)
        self._coords = np.zeros((_INITIAL_CAPACITY, dim), dtype=np.float64)
        self._row_of = np.full(_INITIAL_CAPACITY, -1, dtype=np.int64)  # id -> row
        self._id_of = np.full(_INITIAL_CAPACITY, -1, dtype=np.int64)   # row -> id
        self._free: list[int] = []
        self._next_id = 0
        self._next_row = 0
        self.n_live = 0
        self.labels: dict[int, str] = {}

    @classmethod
    def from_array(cls, coords, labels=None) -> "PointStore":
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2:
            raise ValueError("expected a 2-d array of points")
        store = cls(coords.shape[1])
        for i in range(coords.shape[0]):
            label = labels[i] if labels is not None else None
            store.add(coords[i], label)
        return store

    # -- capacity plumbing ------------------------------------------------

    @property
    def capacity(self) -> int:
        return self._coords.shape[0]

    @property
    def coords(self) -> np.ndarray:
        """Full capacity matrix; only live rows are meaningful."""
        return self._coords

    @property
    def id_capacity(self) -> int:
        return self._row_of.shape[0]

    @property
    def row_of(self) -> np.ndarray:
        """id -> row lookup table, -1 for dead or unassigned ids."""
        return self._row_of

    def _grow_rows(self) -> None:
        new_cap = self._coords.shape[0] * 2
        grown = np.zeros((new_cap, self.dim), dtype=np.float64)
        grown[: self._coords.shape[0]] = self._coords
        self._coords = grown
        grown_ids = np.full(new_cap, -1, dtype=np.int64)
        grown_ids[: self._id_of.shape[0]] = self._id_of
        self._id_of = grown_ids

    def _grow_ids(self) -> None:
        new_cap = self._row_of.shape[0] * 2
        grown = np.full(new_cap, -1, dtype=np.int64)
        grown[: self._row_of.shape[0]] = self._row_of
        self._row_of = grown

    # -- core operations ---------------------------------------------------

    def add(self, vector, label: str | None = None) -> int:
        vec = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vec.shape[0] != self.dim:
            raise ValueError(f"expected {self.dim} coordinates, got {vec.shape[0]}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("coordinates must be finite")
        if self._free:
            row = self._free.pop()
        else:
            if self._next_row == self._coords.shape[0]:
                self._grow_rows()
            row = self._next_row
            self._next_row += 1
        pid = self._next_id
        self._next_id += 1
        if pid == self._row_of.shape[0]:
            self._grow_ids()
        self._coords[row] = vec
        self._row_of[pid] = row
        self._id_of[row] = pid
        self.n_live += 1
        if label is not None:
            self.labels[pid] = label
        return pid

    def remove(self, pid: int) -> None:
        row = self.row(pid)
        self._row_of[pid] = -1
        self._id_of[row] = -1
        self._free.append(row)
        self.n_live -= 1
        self.labels.pop(pid, None)

    def row(self, pid: int) -> int:
        if pid < 0 or pid >= self._row_of.shape[0] or self._row_of[pid] < 0:
            raise KeyError(f"unknown point id {pid}")
        return int(self._row_of[pid])

    def has(self, pid: int) -> bool:
        return 0 <= pid < self._row_of.shape[0] and self._row_of[pid] >= 0

    def get(self, pid: int) -> np.ndarray:
        return self._coords[self.row(pid)].copy()

    def live_ids(self) -> np.ndarray:
        """Live ids in ascending order."""
        return np.flatnonzero(self._row_of >= 0).astype(np.int64)

    def live_rows(self) -> np.ndarray:
        """Rows of live points, ordered by ascending id."""
        return self._row_of[self._row_of >= 0]

    def live_coords(self) -> np.ndarray:
        """Copy of live coordinates, ordered by ascending id."""
        return self._coords[self.live_rows()]

    def replace_coords(self, new_coords: dict[int, np.ndarray] | np.ndarray, dim: int | None = None) -> None:
        """Swap every live point's coordinates, possibly changing dimensionality.

        Accepts either a mapping id -> vector covering exactly the live ids, or
        an array aligned with live_ids() order. Ids, rows and labels survive.
        """
        ids = self.live_ids()
        if isinstance(new_coords, dict):
            if set(new_coords) != set(int(i) for i in ids):
                raise ValueError("replacement must cover exactly the live ids")
            mat = np.asarray([new_coords[int(i)] for i in ids], dtype=np.float64)
        else:
            mat = np.asarray(new_coords, dtype=np.float64)
            if mat.shape[0] != ids.shape[0]:
                raise ValueError("replacement row count must match live point count")
        if mat.ndim != 2:
            raise ValueError("expected a 2-d array of points")
        if not np.all(np.isfinite(mat)):
            raise ValueError("coordinates must be finite")
        new_dim = mat.shape[1] if dim is None else dim
        if new_dim != self.dim:
            fresh = np.zeros((self._coords.shape[0], new_dim), dtype=np.float64)
            self._coords = fresh
            self.dim = int(new_dim)
        self._coords[self.live_rows()] = mat
