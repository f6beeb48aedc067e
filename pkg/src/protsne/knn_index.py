"""Forest of randomized KD-trees for approximate nearest neighbors.

Each tree splits on a dimension drawn uniformly from the highest-variance
dimensions of the node's subset, at the median. Queries descend every tree to
its natural leaf, then work a single priority queue of deferred branches
shared across the forest, keyed by distance to the splitting hyperplane, until
a leaf budget is exhausted. Squared Euclidean distance throughout; ties break
toward the smaller point id.

Trees are seeded independently from the forest seed, so the first T trees of
any forest are identical across runs and across larger forests with the same
seed. Calibration leans on that: it grows one forest to the largest tree
count, measures the grid, then truncates to the winner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange, get_num_threads

from .points import PointStore

BUCKET_CAP = 16
DEFAULT_TREE_GRID = (1, 2, 4, 8)
DEFAULT_LEAF_GRID = (1, 64, 256, 1024, 4096)


class EmptyDatasetError(ValueError):
    pass


@dataclass
class NeighborList:
    owner: int
    ids: np.ndarray
    sq_dists: np.ndarray
    exact: bool


@dataclass
class CalibrationResult:
    chosen_trees: int
    chosen_leaves: int
    measured_recall: float
    sample_size: int
    reached_target: bool


# ---------------------------------------------------------------------------
# compiled query path
# ---------------------------------------------------------------------------

@njit(cache=True)
def _pq_push(keys, vals, size, key, val):
    keys[size] = key
    vals[size] = val
    i = size
    while i > 0:
        p = (i - 1) >> 1
        if keys[p] > keys[i] or (keys[p] == keys[i] and vals[p] > vals[i]):
            keys[p], keys[i] = keys[i], keys[p]
            vals[p], vals[i] = vals[i], vals[p]
            i = p
        else:
            break
    return size + 1


@njit(cache=True)
def _pq_pop(keys, vals, size):
    top = vals[0]
    size -= 1
    keys[0] = keys[size]
    vals[0] = vals[size]
    i = 0
    while True:
        l = 2 * i + 1
        if l >= size:
            break
        r = l + 1
        m = l
        if r < size and (keys[r] < keys[l] or (keys[r] == keys[l] and vals[r] < vals[l])):
            m = r
        if keys[m] < keys[i] or (keys[m] == keys[i] and vals[m] < vals[i]):
            keys[m], keys[i] = keys[i], keys[m]
            vals[m], vals[i] = vals[i], vals[m]
            i = m
        else:
            break
    return top, size


@njit(cache=True, inline="always")
def _cand_after(d2a, ida, d2b, idb):
    # True when (d2a, ida) sorts after (d2b, idb); the heap root is the worst.
    return d2a > d2b or (d2a == d2b and ida > idb)


@njit(cache=True)
def _cand_push(cd2, cid, size, d2, pid):
    cd2[size] = d2
    cid[size] = pid
    i = size
    while i > 0:
        p = (i - 1) >> 1
        if _cand_after(cd2[i], cid[i], cd2[p], cid[p]):
            cd2[p], cd2[i] = cd2[i], cd2[p]
            cid[p], cid[i] = cid[i], cid[p]
            i = p
        else:
            break
    return size + 1


@njit(cache=True)
def _cand_sift_down(cd2, cid, size):
    i = 0
    while True:
        l = 2 * i + 1
        if l >= size:
            break
        r = l + 1
        m = l
        if r < size and _cand_after(cd2[r], cid[r], cd2[l], cid[l]):
            m = r
        if _cand_after(cd2[m], cid[m], cd2[i], cid[i]):
            cd2[m], cd2[i] = cd2[i], cd2[m]
            cid[m], cid[i] = cid[i], cid[m]
            i = m
        else:
            break


@njit(cache=True, parallel=True)
def _query_kernel(queries, k, leaf_budget, n_trees, roots,
                  node_dim, node_thresh, node_left, node_right, node_bucket,
                  bucket_ids, bucket_len, coords, row_of, exclude,
                  out_id, out_d2, out_cnt, n_chunks, pq_cap, row_cap):
    nq = queries.shape[0]
    dims = queries.shape[1]
    pq_keys = np.empty((n_chunks, pq_cap), dtype=np.float64)
    pq_vals = np.empty((n_chunks, pq_cap), dtype=np.int64)
    seen = np.zeros((n_chunks, row_cap), dtype=np.int64)
    cand_d2 = np.empty((n_chunks, k), dtype=np.float64)
    cand_id = np.empty((n_chunks, k), dtype=np.int64)
    for c in prange(n_chunks):
        q_lo = c * nq // n_chunks
        q_hi = (c + 1) * nq // n_chunks
        pk = pq_keys[c]
        pv = pq_vals[c]
        sn = seen[c]
        cd2 = cand_d2[c]
        cid = cand_id[c]
        for q in range(q_lo, q_hi):
            stamp = q + 1
            skip = exclude[q]
            pq_size = 0
            cand_n = 0
            worst_d2 = np.inf
            worst_id = np.int64(1) << 62
            leaves = 0
            next_tree = 0
            while leaves < leaf_budget:
                if next_tree < n_trees:
                    node = roots[next_tree]
                    next_tree += 1
                elif pq_size > 0:
                    node, pq_size = _pq_pop(pk, pv, pq_size)
                else:
                    break
                # descend to the natural leaf, deferring far branches
                while node_dim[node] >= 0:
                    diff = queries[q, node_dim[node]] - node_thresh[node]
                    if diff < 0.0:
                        near = node_left[node]
                        far = node_right[node]
                    else:
                        near = node_right[node]
                        far = node_left[node]
                    pq_size = _pq_push(pk, pv, pq_size, abs(diff), far)
                    node = near
                leaves += 1
                b = node_bucket[node]
                for s in range(bucket_len[b]):
                    pid = bucket_ids[b, s]
                    if pid == skip:
                        continue
                    prow = row_of[pid]
                    if sn[prow] == stamp:
                        continue
                    sn[prow] = stamp
                    acc = 0.0
                    dd = 0
                    aborted = False
                    while dd < dims:
                        hi = dd + 16
                        if hi > dims:
                            hi = dims
                        while dd < hi:
                            t = queries[q, dd] - coords[prow, dd]
                            acc += t * t
                            dd += 1
                        # strict >: an exact tie can still win on id
                        if cand_n == k and acc > worst_d2:
                            aborted = True
                            break
                    if aborted:
                        continue
                    if cand_n < k:
                        cand_n = _cand_push(cd2, cid, cand_n, acc, pid)
                        if cand_n == k:
                            worst_d2 = cd2[0]
                            worst_id = cid[0]
                    elif acc < worst_d2 or (acc == worst_d2 and pid < worst_id):
                        cd2[0] = acc
                        cid[0] = pid
                        _cand_sift_down(cd2, cid, cand_n)
                        worst_d2 = cd2[0]
                        worst_id = cid[0]
            # drain the heap worst-first to emit ascending (distance, id)
            out_cnt[q] = cand_n
            while cand_n > 0:
                out_d2[q, cand_n - 1] = cd2[0]
                out_id[q, cand_n - 1] = cid[0]
                cand_n -= 1
                cd2[0] = cd2[cand_n]
                cid[0] = cid[cand_n]
                _cand_sift_down(cd2, cid, cand_n)


# ---------------------------------------------------------------------------
# forest structure
# ---------------------------------------------------------------------------

class KdForest:
    """Mutable forest arena over a PointStore.

    Nodes of all trees share flat arrays; buckets hold point ids. A per-tree
    leaf lookup table keeps removals O(1) even when build-time median ties
    placed equal coordinates on both sides of a split.
    """

    def __init__(self, points: PointStore, variance_pool: int, seed: int):
        self.points = points
        self.variance_pool = max(1, min(variance_pool, points.dim))
        self.seed = seed
        self.default_leaf_budget = 64
        self._epoch = 0
        self._pristine = True
        self._node_dim = np.full(256, -2, dtype=np.int64)
        self._node_thresh = np.zeros(256, dtype=np.float64)
        self._node_left = np.full(256, -1, dtype=np.int64)
        self._node_right = np.full(256, -1, dtype=np.int64)
        self._node_bucket = np.full(256, -1, dtype=np.int64)
        self._bucket_ids = np.zeros((64, BUCKET_CAP + 1), dtype=np.int64)
        self._bucket_len = np.zeros(64, dtype=np.int64)
        self._bucket_free: list[int] = []
        self._n_nodes = 0
        self._n_buckets = 0
        self.roots: list[int] = []
        self._tree_node_start: list[int] = []
        self._tree_bucket_start: list[int] = []
        self._leaf_of = np.full((0, points.id_capacity), -1, dtype=np.int64)
        self.build_n = 0

    # -- arena plumbing ----------------------------------------------------

    @property
    def n_trees(self) -> int:
        return len(self.roots)

    @property
    def n_live(self) -> int:
        return self.points.n_live

    def _alloc_node(self) -> int:
        if self._n_nodes == self._node_dim.shape[0]:
            for name in ("_node_dim", "_node_thresh", "_node_left",
                         "_node_right", "_node_bucket"):
                arr = getattr(self, name)
                grown = np.resize(arr, arr.shape[0] * 2)
                grown[arr.shape[0]:] = -2 if name == "_node_dim" else -1
                if name == "_node_thresh":
                    grown[arr.shape[0]:] = 0.0
                setattr(self, name, grown)
        idx = self._n_nodes
        self._n_nodes += 1
        return idx

    def _alloc_bucket(self) -> int:
        if self._bucket_free:
            b = self._bucket_free.pop()
            self._bucket_len[b] = 0
            return b
        if self._n_buckets == self._bucket_ids.shape[0]:
            old = self._bucket_ids
            self._bucket_ids = np.zeros((old.shape[0] * 2, BUCKET_CAP + 1), dtype=np.int64)
            self._bucket_ids[: old.shape[0]] = old
            self._bucket_len = np.resize(self._bucket_len, old.shape[0] * 2)
            self._bucket_len[old.shape[0]:] = 0
        b = self._n_buckets
        self._n_buckets += 1
        return b

    def _sync_leaf_table(self) -> None:
        want_rows = self.n_trees
        want_cols = self.points.id_capacity
        if self._leaf_of.shape[0] < want_rows or self._leaf_of.shape[1] < want_cols:
            grown = np.full((want_rows, want_cols), -1, dtype=np.int64)
            r, c = self._leaf_of.shape
            grown[:r, :c] = self._leaf_of
            self._leaf_of = grown

    # -- building ------------------------------------------------------------

    def _make_leaf(self, tree: int, ids: np.ndarray) -> int:
        node = self._alloc_node()
        b = self._alloc_bucket()
        n = ids.shape[0]
        self._bucket_ids[b, :n] = ids
        self._bucket_len[b] = n
        self._node_dim[node] = -1
        self._node_bucket[node] = b
        self._leaf_of[tree, ids] = node
        return node

    def _build_subtree(self, tree: int, ids: np.ndarray, rng) -> int:
        if ids.shape[0] <= BUCKET_CAP:
            return self._make_leaf(tree, ids)
        coords = self.points.coords
        rows = self.points.row_of[ids]
        sub = coords[rows]
        var = sub.var(axis=0)
        v = self.variance_pool
        if v < var.shape[0]:
            pool = np.argpartition(-var, v - 1)[:v]
        else:
            pool = np.arange(var.shape[0])
        dim = int(pool[rng.integers(0, pool.shape[0])])
        vals = sub[:, dim]
        order = np.argsort(vals, kind="stable")
        mid = ids.shape[0] // 2
        thresh = 0.5 * (vals[order[mid - 1]] + vals[order[mid]])
        node = self._alloc_node()
        self._node_dim[node] = dim
        self._node_thresh[node] = thresh
        self._node_bucket[node] = -1
        left = self._build_subtree(tree, ids[order[:mid]], rng)
        right = self._build_subtree(tree, ids[order[mid:]], rng)
        self._node_left[node] = left
        self._node_right[node] = right
        return node

    def ensure_trees(self, n_trees: int) -> None:
        """Grow the forest to n_trees trees; existing trees are untouched."""
        if self.n_live == 0:
            raise EmptyDatasetError("empty dataset")
        ids = self.points.live_ids()
        while self.n_trees < n_trees:
            t = self.n_trees
            self._tree_node_start.append(self._n_nodes)
            self._tree_bucket_start.append(self._n_buckets)
            self.roots.append(-1)
            self._sync_leaf_table()
            rng = np.random.default_rng([self.seed, self._epoch, t])
            self.roots[t] = self._build_subtree(t, ids, rng)
        self.build_n = self.n_live

    def truncate_trees(self, n_trees: int) -> None:
        """Drop trees beyond n_trees. Only valid before any dynamic update."""
        if not self._pristine:
            raise RuntimeError("cannot truncate a forest after dynamic updates")
        if n_trees >= self.n_trees:
            return
        self._n_nodes = self._tree_node_start[n_trees]
        self._n_buckets = self._tree_bucket_start[n_trees]
        self.roots = self.roots[:n_trees]
        self._tree_node_start = self._tree_node_start[:n_trees]
        self._tree_bucket_start = self._tree_bucket_start[:n_trees]
        self._leaf_of = self._leaf_of[:n_trees]

    def rebuild(self) -> None:
        """Rebuild every tree from the live points."""
        n_trees = self.n_trees
        self._epoch += 1
        self._pristine = True
        self._node_dim[: self._n_nodes] = -2
        self._n_nodes = 0
        self._n_buckets = 0
        self._bucket_free.clear()
        self._bucket_len[:] = 0
        self.roots = []
        self._tree_node_start = []
        self._tree_bucket_start = []
        self._leaf_of = np.full((0, self.points.id_capacity), -1, dtype=np.int64)
        self.ensure_trees(n_trees)

    def _maybe_rebuild(self) -> bool:
        if self.build_n == 0:
            return False
        if self.n_live > 1.5 * self.build_n or self.n_live < 0.5 * self.build_n:
            self.rebuild()
            return True
        return False

    # -- dynamic updates -----------------------------------------------------

    def insert(self, pid: int) -> None:
        """Register an id already present in the point store. O(log N) per tree."""
        vec = self.points.coords[self.points.row(pid)]
        self._sync_leaf_table()
        self._pristine = False
        for t in range(self.n_trees):
            node = self.roots[t]
            while self._node_dim[node] >= 0:
                if vec[self._node_dim[node]] < self._node_thresh[node]:
                    node = self._node_left[node]
                else:
                    node = self._node_right[node]
            b = self._node_bucket[node]
            n = self._bucket_len[b]
            self._bucket_ids[b, n] = pid
            self._bucket_len[b] = n + 1
            self._leaf_of[t, pid] = node
            if n + 1 > BUCKET_CAP:
                self._split_leaf(t, node)
        self._maybe_rebuild()

    def _split_leaf(self, tree: int, node: int) -> None:
        b = int(self._node_bucket[node])
        n = int(self._bucket_len[b])
        ids = self._bucket_ids[b, :n].copy()
        rows = self.points.row_of[ids]
        sub = self.points.coords[rows]
        dim = int(np.argmax(sub.var(axis=0)))
        vals = sub[:, dim]
        order = np.argsort(vals, kind="stable")
        mid = n // 2
        thresh = 0.5 * (vals[order[mid - 1]] + vals[order[mid]])
        left = self._make_leaf(tree, ids[order[:mid]])
        right = self._make_leaf(tree, ids[order[mid:]])
        self._node_dim[node] = dim
        self._node_thresh[node] = thresh
        self._node_left[node] = left
        self._node_right[node] = right
        self._node_bucket[node] = -1
        self._bucket_free.append(b)

    def remove(self, pid: int) -> None:
        """Drop an id from every tree. Empty leaves are allowed to persist."""
        self._pristine = False
        for t in range(self.n_trees):
            node = self._leaf_of[t, pid]
            if node < 0:
                continue
            b = self._node_bucket[node]
            n = self._bucket_len[b]
            for s in range(n):
                if self._bucket_ids[b, s] == pid:
                    self._bucket_ids[b, s] = self._bucket_ids[b, n - 1]
                    self._bucket_len[b] = n - 1
                    break
            self._leaf_of[t, pid] = -1
        self._maybe_rebuild()

    # -- introspection -------------------------------------------------------

    def census(self, tree: int) -> np.ndarray:
        """All ids held by one tree's leaves, sorted ascending."""
        out: list[int] = []
        stack = [self.roots[tree]]
        while stack:
            node = stack.pop()
            if self._node_dim[node] >= 0:
                stack.append(self._node_left[node])
                stack.append(self._node_right[node])
            else:
                b = self._node_bucket[node]
                out.extend(self._bucket_ids[b, : self._bucket_len[b]].tolist())
        return np.sort(np.asarray(out, dtype=np.int64))

    def max_bucket_len(self) -> int:
        if self._n_buckets == 0:
            return 0
        return int(self._bucket_len[: self._n_buckets].max())


def build_forest(points: PointStore, n_trees: int, variance_pool: int = 5,
                 seed: int = 0) -> KdForest:
    if points.n_live == 0:
        raise EmptyDatasetError("empty dataset")
    if n_trees < 1:
        raise ValueError("need at least one tree")
    forest = KdForest(points, variance_pool, seed)
    forest.ensure_trees(n_trees)
    return forest


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------

def query_knn_batch(forest: KdForest, queries: np.ndarray, k: int,
                    leaf_budget: int | None = None,
                    exclude: np.ndarray | None = None,
                    n_trees: int | None = None):
    """Approximate k-nearest ids for a batch of query vectors.

    Returns (ids, sq_dists, counts); rows are padded past counts. exclude is
    an optional per-query id to self-filter.
    """
    if forest.n_live == 0:
        raise EmptyDatasetError("empty dataset")
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != forest.points.dim:
        raise ValueError("query dimensionality mismatch")
    if k < 1:
        raise ValueError("k must be >= 1")
    budget = forest.default_leaf_budget if leaf_budget is None else int(leaf_budget)
    if budget < 1:
        raise ValueError("leaf budget must be >= 1")
    trees = forest.n_trees if n_trees is None else int(n_trees)
    if trees < 1 or trees > forest.n_trees:
        raise ValueError("bad tree count")
    nq = queries.shape[0]
    out_id = np.empty((nq, k), dtype=np.int64)
    out_d2 = np.empty((nq, k), dtype=np.float64)
    out_cnt = np.empty(nq, dtype=np.int64)
    if exclude is None:
        exclude = np.full(nq, -1, dtype=np.int64)
    else:
        exclude = np.ascontiguousarray(exclude, dtype=np.int64)
    n_chunks = max(1, min(nq, get_num_threads() * 4))
    pq_cap = forest._n_nodes + trees + 8
    _query_kernel(queries, k, budget, trees,
                  np.asarray(forest.roots[:trees], dtype=np.int64),
                  forest._node_dim[: forest._n_nodes],
                  forest._node_thresh[: forest._n_nodes],
                  forest._node_left[: forest._n_nodes],
                  forest._node_right[: forest._n_nodes],
                  forest._node_bucket[: forest._n_nodes],
                  forest._bucket_ids[: forest._n_buckets],
                  forest._bucket_len[: forest._n_buckets],
                  forest.points.coords, forest.points.row_of,
                  exclude, out_id, out_d2, out_cnt,
                  n_chunks, pq_cap, forest.points.capacity)
    return out_id, out_d2, out_cnt


def query_knn(forest: KdForest, query: np.ndarray, k: int,
              leaf_budget: int | None = None, exclude: int = -1,
              n_trees: int | None = None) -> NeighborList:
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    ids, d2, cnt = query_knn_batch(forest, q, k, leaf_budget,
                                   np.asarray([exclude], dtype=np.int64), n_trees)
    n = int(cnt[0])
    return NeighborList(owner=int(exclude), ids=ids[0, :n].copy(),
                        sq_dists=d2[0, :n].copy(), exact=False)


# ---------------------------------------------------------------------------
# exact baseline
# ---------------------------------------------------------------------------

def brute_force_batch(points: PointStore, owner_ids: np.ndarray, k: int,
                      chunk: int = 256):
    """Exact k-nearest (ids, sq_dists) per owner, ties broken by ascending id."""
    if points.n_live == 0:
        raise EmptyDatasetError("empty dataset")
    ids = points.live_ids()
    n = ids.shape[0]
    if n < 2:
        raise ValueError("need at least two live points")
    x = points.coords[points.row_of[ids]]
    xx = np.einsum("ij,ij->i", x, x)
    owner_ids = np.asarray(owner_ids, dtype=np.int64)
    kk = min(k, n - 1)
    out_id = np.empty((owner_ids.shape[0], kk), dtype=np.int64)
    out_d2 = np.empty((owner_ids.shape[0], kk), dtype=np.float64)
    for lo in range(0, owner_ids.shape[0], chunk):
        sel = owner_ids[lo: lo + chunk]
        q = points.coords[points.row_of[sel]]
        d2 = np.maximum(xx[None, :] - 2.0 * (q @ x.T) + np.einsum("ij,ij->i", q, q)[:, None], 0.0)
        cols = np.searchsorted(ids, sel)
        d2[np.arange(sel.shape[0]), cols] = np.inf
        part = np.argpartition(d2, kk - 1, axis=1)[:, :kk]
        part.sort(axis=1)  # columns ascend with id, so stable sort below is lex
        sel_d2 = np.take_along_axis(d2, part, axis=1)
        order = np.argsort(sel_d2, axis=1, kind="stable")
        sel_d2 = np.take_along_axis(sel_d2, order, axis=1)
        sel_col = np.take_along_axis(part, order, axis=1)
        # argpartition may strand an equal-distance smaller id past the cut
        kthd = sel_d2[:, -1]
        n_at = (d2 == kthd[:, None]).sum(axis=1)
        s_at = (sel_d2 == kthd[:, None]).sum(axis=1)
        for r in np.flatnonzero(n_at > s_at):
            full = np.lexsort((np.arange(n), d2[r]))[:kk]
            sel_col[r] = full
            sel_d2[r] = d2[r][full]
        out_id[lo: lo + sel.shape[0]] = ids[sel_col]
        out_d2[lo: lo + sel.shape[0]] = sel_d2
    return out_id, out_d2


def brute_force_knn(points: PointStore, owner: int, k: int) -> NeighborList:
    ids, d2 = brute_force_batch(points, np.asarray([owner], dtype=np.int64), k)
    return NeighborList(owner=int(owner), ids=ids[0].copy(),
                        sq_dists=d2[0].copy(), exact=True)


# ---------------------------------------------------------------------------
# recall + calibration
# ---------------------------------------------------------------------------

def measure_recall(approx: list[NeighborList], exact: list[NeighborList]) -> float:
    """Mean per-owner fraction of exact neighbors found by the approximate lists."""
    if len(approx) != len(exact):
        raise ValueError("lists must align")
    if not approx:
        raise ValueError("nothing to measure")
    total = 0.0
    for a, e in zip(approx, exact):
        if a.owner != e.owner:
            raise ValueError("owners must align")
        if e.ids.shape[0] == 0:
            total += 1.0
            continue
        total += np.intersect1d(a.ids, e.ids, assume_unique=True).shape[0] / e.ids.shape[0]
    return total / len(approx)


def _recall_arrays(approx_ids: np.ndarray, approx_cnt: np.ndarray,
                   exact_ids: np.ndarray) -> float:
    k = exact_ids.shape[1]
    total = 0.0
    for i in range(exact_ids.shape[0]):
        a = approx_ids[i, : approx_cnt[i]]
        total += np.intersect1d(a, exact_ids[i], assume_unique=True).shape[0] / k
    return total / exact_ids.shape[0]


def calibrate(points: PointStore, k: int, target_recall: float,
              sample: int | None = None, seed: int = 0,
              tree_grid=DEFAULT_TREE_GRID, leaf_grid=DEFAULT_LEAF_GRID) -> CalibrationResult:
    result, forest = calibrate_with_forest(points, k, target_recall, sample, seed,
                                           tree_grid, leaf_grid)
    return result


def calibrate_with_forest(points: PointStore, k: int, target_recall: float,
                          sample: int | None = None, seed: int = 0,
                          tree_grid=DEFAULT_TREE_GRID, leaf_grid=DEFAULT_LEAF_GRID):
    """Pick the cheapest (trees, leaf budget) whose sampled recall meets target.

    Configs are measured in ascending modeled cost trees*ln(N) + leaves, so the
    first hit is the cheapest qualifying config. Returns the result along with
    the forest truncated to the winner, its default budget set.
    """
    if not 0.0 <= target_recall <= 1.0:
        raise ValueError("target recall must be in [0, 1]")
    n = points.n_live
    if n < 2:
        raise ValueError("need at least two live points")
    if sample is None:
        sample = min(500, n)
    sample = min(sample, n)
    rng = np.random.default_rng([seed, 11])
    ids = points.live_ids()
    owners = np.sort(rng.choice(ids, size=sample, replace=False))
    exact_ids, _ = brute_force_batch(points, owners, k)
    queries = points.coords[points.row_of[owners]]

    configs = sorted(((t, l) for t in tree_grid for l in leaf_grid),
                     key=lambda tl: (tl[0] * math.log(max(n, 2)) + tl[1], tl[0], tl[1]))
    forest = build_forest(points, 1, min(5, points.dim), seed)
    best = None
    chosen = None
    for t, l in configs:
        forest.ensure_trees(t)
        a_ids, _, a_cnt = query_knn_batch(forest, queries, k, l, owners, n_trees=t)
        rho = _recall_arrays(a_ids, a_cnt, exact_ids)
        if best is None or rho > best[0] + 1e-12:
            best = (rho, t, l)
        if rho >= target_recall:
            chosen = CalibrationResult(t, l, rho, sample, True)
            break
    if chosen is None:
        rho, t, l = best
        chosen = CalibrationResult(t, l, rho, sample, False)
    forest.ensure_trees(chosen.chosen_trees)
    forest.truncate_trees(chosen.chosen_trees)
    forest.default_leaf_budget = chosen.chosen_leaves
    return chosen, forest
