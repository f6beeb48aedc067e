"""Online point dynamics: insert, delete, re-dimension, and stream ticks.

All operations mutate the live stores in place and are meant to run on the
coordinator thread between optimizer iterations. Inserts splice the new point
into every neighborhood it improves (evicting that row's farthest neighbor);
deletes drop the point from every row that references it, discounting those
rows' precision instead of backfilling. Neither path re-solves bandwidths:
rows renormalize with their existing sigma, and refinement is the recovery
mechanism for accumulated drift.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import knn_index
from .knn_index import NeighborList
from .optimizer import Embedding, Optimizer, OptimizerConfig
from .points import PointStore
from .similarity import InitResult, SimilarityStore, build_row, init_all


@dataclass
class StreamWindow:
    """Sliding logical-time window over streamed points."""
    duration: float
    arrivals: deque = field(default_factory=deque)   # (timestamp, id)
    watermark: int = 0
    last_now: float = float("-inf")

    def live_count(self) -> int:
        return len(self.arrivals)


class DynamicState:
    """Bundle of the live stores plus the operations that restructure them."""

    def __init__(self, points: PointStore, store: SimilarityStore, forest,
                 optimizer: Optimizer, target_precision: float, seed: int,
                 calibration=None):
        self.points = points
        self.store = store
        self.forest = forest
        self.optimizer = optimizer
        self.emb = optimizer.emb
        self.target_precision = float(target_precision)
        self.seed = int(seed)
        self.calibration = calibration

    @classmethod
    def initialize(cls, points: PointStore, perplexity: float,
                   target_precision: float, seed: int = 0,
                   config: OptimizerConfig | None = None,
                   sample: int | None = None) -> "DynamicState":
        res = init_all(points, perplexity, target_precision, seed=seed,
                       sample=sample)
        emb = Embedding(points, seed=seed,
                        init_std=(config or OptimizerConfig()).init_std)
        opt = Optimizer(res.store, emb, config)
        return cls(points, res.store, res.forest, opt, target_precision,
                   seed, res.calibration)

    # -- insert ---------------------------------------------------------------

    def _query_new(self, pid: int, vec: np.ndarray) -> NeighborList:
        k = min(self.store.K, self.points.n_live - 1)
        if self.target_precision >= 1.0:
            return knn_index.brute_force_knn(self.points, pid, k)
        ids, d2, cnt = knn_index.query_knn_batch(
            self.forest, vec.reshape(1, -1), k,
            exclude=np.array([pid], dtype=np.int64))
        m = int(cnt[0])
        return NeighborList(pid, ids[0, :m], d2[0, :m], False)

    def insert(self, vector, label: str | None = None) -> int:
        """Add a point: allocate, splice into neighborhoods, place, arm boost."""
        pts = self.points
        vec = np.asarray(vector, dtype=np.float64).reshape(-1)
        pid = pts.add(vec, label)             # validates dimensionality
        self.store._ensure_capacity()
        self.emb.ensure_capacity()
        self.forest.insert(pid)

        nbrs = self._query_new(pid, vec)
        # starved budgets can hand back fewer neighbors than the perplexity
        mu = min(self.store.perplexity, float(nbrs.ids.shape[0]))
        row = build_row(pid, nbrs, mu, self.target_precision)
        self.store.set_row(row)

        # reverse pass: enter every row whose eviction radius covers us
        live = pts.live_ids()
        live = live[live != pid]
        rows = pts.row_of[live]
        delta = pts.coords[rows] - vec[None, :]
        d2 = np.einsum("ij,ij->i", delta, delta)
        thresh = self.store.d_max_sq_of_rows()[rows]
        hit = np.flatnonzero(d2 < thresh)
        for h in hit:
            self.store.evict_farthest_insert(int(live[h]), pid, float(d2[h]))

        # similarity-weighted placement among the new neighborhood
        nbr_rows = pts.row_of[row.neighbor_ids]
        y = row.cond_prob @ self.emb.pos[nbr_rows]
        self.emb.born(pid, y, self.optimizer.config.exaggeration)
        return pid

    # -- delete ---------------------------------------------------------------

    def delete(self, pid: int) -> None:
        pts = self.points
        if not pts.has(pid):
            raise KeyError(f"id {pid} is not live")
        owners = [o for o in self.store.reverse_index.get(pid, ()) if o != pid]
        for o in owners:
            self.store.drop_neighbor(o, pid)
        self.store.remove_row(pid)
        self.store.reverse_index.pop(pid, None)
        self.forest.remove(pid)
        pts.remove(pid)

    # -- re-dimension ------------------------------------------------------------

    def redim(self, new_points) -> None:
        """Swap in re-dimensioned data for the same id set.

        new_points is either a PointStore or a mapping id -> vector; the id
        set must match exactly. Rows and the forest are rebuilt from scratch
        at the session's target precision (same seed, so identical data
        reproduces the identical store); layout positions survive, and every
        point's attraction boost re-arms so the embedding can re-settle.
        """
        pts = self.points
        old_ids = pts.live_ids()
        if isinstance(new_points, PointStore):
            new_ids = new_points.live_ids()
            coords = {int(i): new_points.get(int(i)) for i in new_ids}
        else:
            coords = {int(i): np.asarray(v, dtype=np.float64)
                      for i, v in new_points.items()}
            new_ids = np.array(sorted(coords), dtype=np.int64)
        if old_ids.shape[0] != new_ids.shape[0] or not np.array_equal(old_ids, new_ids):
            raise ValueError("re-dimension requires the identical id set")
        dims = {v.shape[0] for v in coords.values()}
        if len(dims) != 1:
            raise ValueError("inconsistent dimensionality in replacement data")
        pts.replace_coords(coords, dim=dims.pop())

        res = init_all(pts, self.store.perplexity, self.target_precision,
                       seed=self.seed)
        self.store = res.store
        self.forest = res.forest
        self.calibration = res.calibration
        self.optimizer.store = res.store
        live = pts.live_rows()
        self.emb.tau[live] = self.optimizer.config.exaggeration

    # -- streaming ---------------------------------------------------------------

    def tick(self, window: StreamWindow, now: float, arrivals,
             labels=None) -> tuple[list[int], list[int]]:
        """Insert this tick's arrivals, expire everything older than the window.

        Timestamps are caller-supplied logical times and must not go
        backwards. Points deleted out-of-band simply fall out of the queue.
        """
        if now < window.last_now:
            raise ValueError("stream time went backwards")
        window.last_now = now
        inserted: list[int] = []
        for k, vec in enumerate(arrivals):
            label = labels[k] if labels is not None else None
            pid = self.insert(vec, label)
            window.arrivals.append((now, pid))
            inserted.append(pid)
        window.watermark = max(window.watermark, len(window.arrivals))
        expired: list[int] = []
        while window.arrivals and now - window.arrivals[0][0] >= window.duration:
            _, pid = window.arrivals.popleft()
            if self.points.has(pid):
                self.delete(pid)
                expired.append(pid)
        return inserted, expired
