"""Sparse Gaussian similarities with per-point bandwidth solved for perplexity.

Each point owns a row over its K = floor(3 * perplexity) nearest (possibly
approximate) neighbors. Conditional probabilities are normalized within the
row; the joint probability of a pair is assembled on demand from the two
directed halves, p(i,j) = (p(j|i) + p(i|j)) / (2N), so no global matrix is
ever materialized. Rows carry the requested precision they were built at and
an exact flag; a reverse index maps every id to the row owners that hold it.
"""

from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from .points import PointStore
from . import knn_index
from .knn_index import NeighborList

SIGMA_TOL = 1e-5
SIGMA_MAX_ITER = 200


# ---------------------------------------------------------------------------
# bandwidth search
# ---------------------------------------------------------------------------

def _row_probs(shifted_d2: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    e = np.exp(-shifted_d2 / (2.0 * sigma[:, None] ** 2))
    return e / e.sum(axis=1)[:, None]


def _perplexity(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0.0, probs * np.log2(probs), 0.0)
    return 2.0 ** (-plogp.sum(axis=1))


def solve_sigma_batch(sq_distances: np.ndarray, perplexity: float,
                      tol: float = SIGMA_TOL, max_iter: int = SIGMA_MAX_ITER):
    """Solve each row's bandwidth so that 2^H(row) = perplexity.

    Bisection over sigma with a multiplicatively grown bracket seeded at the
    row's mean distance. Returns (sigma, probs, degenerate). Rows whose
    distances are all equal admit any sigma (probabilities are uniform); they
    are flagged degenerate unless the uniform perplexity, the neighbor count,
    already satisfies the target.
    """
    d2 = np.asarray(sq_distances, dtype=np.float64)
    if d2.ndim != 2:
        raise ValueError("expected (rows, neighbors) squared distances")
    n, k = d2.shape
    if k < 2:
        raise ValueError("need at least two neighbors per row")
    if not 1.0 <= perplexity <= k:
        raise ValueError(f"perplexity must lie in [1, {k}]")
    if not np.all(np.isfinite(d2)) or np.any(d2 < 0.0):
        raise ValueError("squared distances must be finite and non-negative")

    dmin = d2.min(axis=1)
    dmax = d2.max(axis=1)
    flat = dmax == dmin
    all_zero = flat & (dmax == 0.0)
    uniform_ok = abs(k - perplexity) <= tol * perplexity
    degenerate = flat & (all_zero | (not uniform_ok))

    sigma0 = np.sqrt(d2).mean(axis=1)
    sigma = np.where(sigma0 > 0.0, sigma0, 1.0)
    shifted = d2 - dmin[:, None]

    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    active = ~flat
    idx = np.flatnonzero(active)
    s = sigma[idx]
    l = lo[idx]
    h = hi[idx]
    sub = shifted[idx]
    for _ in range(max_iter):
        if idx.shape[0] == 0:
            break
        perp = _perplexity(_row_probs(sub, s))
        err = np.abs(perp - perplexity) / perplexity
        keep = err > tol
        if not keep.all():
            sigma[idx[~keep]] = s[~keep]
            idx = idx[keep]
            s = s[keep]
            l = l[keep]
            h = h[keep]
            sub = sub[keep]
            if idx.shape[0] == 0:
                break
            perp = perp[keep]
        low = perp < perplexity  # need wider kernel
        l = np.where(low, s, l)
        h = np.where(low, h, s)
        grow = low & np.isinf(h)
        shrink = (~low) & (l == 0.0)
        s = np.where(grow, s * 2.0, np.where(shrink, s * 0.5, 0.5 * (l + h)))
        # a target equal to k is only reached in the limit; stop at a cap
        capped = s > 1e100
        if capped.any():
            s = np.where(capped, 1e100, s)
            h = np.where(capped, s, h)
    sigma[idx] = s

    probs = _row_probs(shifted, sigma)
    return sigma, probs, degenerate


def solve_sigma(sq_distances: np.ndarray, perplexity: float,
                tol: float = SIGMA_TOL, max_iter: int = SIGMA_MAX_ITER):
    """Single-row bandwidth solve; returns (sigma, probs, degenerate)."""
    d2 = np.asarray(sq_distances, dtype=np.float64).reshape(1, -1)
    sigma, probs, degenerate = solve_sigma_batch(d2, perplexity, tol, max_iter)
    return float(sigma[0]), probs[0], bool(degenerate[0])


# ---------------------------------------------------------------------------
# rows
# ---------------------------------------------------------------------------

@dataclass
class GaussianRow:
    owner: int
    neighbor_ids: np.ndarray
    sq_dists: np.ndarray
    cond_prob: np.ndarray
    sigma: float
    requested_precision: float
    exact: bool
    degenerate: bool = False

    @property
    def d_max_sq(self) -> float:
        return float(self.sq_dists[-1]) if self.sq_dists.shape[0] else 0.0


def build_row(owner: int, neighbors: NeighborList, perplexity: float,
              requested_precision: float) -> GaussianRow:
    """Solve one neighborhood into a similarity row.

    Exact neighbor lists force requested_precision to 1.0 regardless of the
    argument.
    """
    if neighbors.ids.shape[0] < 2:
        raise ValueError("a row needs at least two neighbors")
    if not 0.0 <= requested_precision <= 1.0:
        raise ValueError("requested precision must be in [0, 1]")
    sigma, probs, degenerate = solve_sigma(neighbors.sq_dists, perplexity)
    rho = 1.0 if neighbors.exact else requested_precision
    return GaussianRow(owner=int(owner),
                       neighbor_ids=neighbors.ids.astype(np.int64).copy(),
                       sq_dists=neighbors.sq_dists.astype(np.float64).copy(),
                       cond_prob=probs,
                       sigma=sigma,
                       requested_precision=rho,
                       exact=bool(neighbors.exact),
                       degenerate=degenerate)


# ---------------------------------------------------------------------------
# store
# ---------------------------------------------------------------------------

class SimilarityStore:
    """Row-aligned matrix storage for all similarity rows.

    Arrays are indexed by PointStore row so the optimizer kernels can walk
    them without indirection. Neighbor entries stay sorted ascending by
    squared distance (insertion order stable within ties), so the eviction
    threshold d_max_sq is always the tail entry.
    """

    def __init__(self, points: PointStore, perplexity: float):
        if perplexity < 1.0:
            raise ValueError("perplexity must be >= 1")
        self.points = points
        self.perplexity = float(perplexity)
        self.K = int(3.0 * perplexity)
        cap = points.capacity
        k = self.K
        self._nbr_id = np.full((cap, k), -1, dtype=np.int64)
        self._nbr_row = np.zeros((cap, k), dtype=np.int64)
        self._nbr_d2 = np.zeros((cap, k), dtype=np.float64)
        self._nbr_p = np.zeros((cap, k), dtype=np.float64)
        self._cnt = np.zeros(cap, dtype=np.int64)
        self._sigma = np.zeros(cap, dtype=np.float64)
        self._rho = np.zeros(cap, dtype=np.float64)
        self._exact = np.zeros(cap, dtype=bool)
        self._degenerate = np.zeros(cap, dtype=bool)
        self._present = np.zeros(cap, dtype=bool)
        self.reverse_index: dict[int, set[int]] = {}
        self.n_rows = 0

    # -- plumbing ----------------------------------------------------------

    def _ensure_capacity(self) -> None:
        cap = self.points.capacity
        if cap <= self._nbr_id.shape[0]:
            return
        k = self.K
        def grow2(arr, fill):
            out = np.full((cap, k), fill, dtype=arr.dtype)
            out[: arr.shape[0]] = arr
            return out
        def grow1(arr, fill):
            out = np.full(cap, fill, dtype=arr.dtype)
            out[: arr.shape[0]] = arr
            return out
        self._nbr_id = grow2(self._nbr_id, -1)
        self._nbr_row = grow2(self._nbr_row, 0)
        self._nbr_d2 = grow2(self._nbr_d2, 0.0)
        self._nbr_p = grow2(self._nbr_p, 0.0)
        self._cnt = grow1(self._cnt, 0)
        self._sigma = grow1(self._sigma, 0.0)
        self._rho = grow1(self._rho, 0.0)
        self._exact = grow1(self._exact, False)
        self._degenerate = grow1(self._degenerate, False)
        self._present = grow1(self._present, False)

    def has_row(self, owner: int) -> bool:
        return self.points.has(owner) and bool(self._present[self.points.row(owner)])

    def row_ids(self) -> np.ndarray:
        """Owners with rows, ascending."""
        live = self.points.live_ids()
        mask = self._present[self.points.row_of[live]]
        return live[mask]

    def row(self, owner: int) -> GaussianRow:
        r = self.points.row(owner)
        if not self._present[r]:
            raise KeyError(f"no similarity row for id {owner}")
        n = self._cnt[r]
        return GaussianRow(owner=int(owner),
                           neighbor_ids=self._nbr_id[r, :n].copy(),
                           sq_dists=self._nbr_d2[r, :n].copy(),
                           cond_prob=self._nbr_p[r, :n].copy(),
                           sigma=float(self._sigma[r]),
                           requested_precision=float(self._rho[r]),
                           exact=bool(self._exact[r]),
                           degenerate=bool(self._degenerate[r]))

    def sigma_of(self, owner: int) -> float:
        return float(self._sigma[self.points.row(owner)])

    def rho_of(self, owner: int) -> float:
        return float(self._rho[self.points.row(owner)])

    # -- writes ------------------------------------------------------------

    def _write_row(self, prow: int, row: GaussianRow) -> None:
        n = row.neighbor_ids.shape[0]
        if n > self.K:
            raise ValueError("row exceeds K neighbors")
        order = np.lexsort((row.neighbor_ids, row.sq_dists))
        self._nbr_id[prow, :n] = row.neighbor_ids[order]
        self._nbr_row[prow, :n] = self.points.row_of[row.neighbor_ids[order]]
        self._nbr_d2[prow, :n] = row.sq_dists[order]
        self._nbr_p[prow, :n] = row.cond_prob[order]
        self._nbr_id[prow, n:] = -1
        self._cnt[prow] = n
        self._sigma[prow] = row.sigma
        self._rho[prow] = row.requested_precision
        self._exact[prow] = row.exact
        self._degenerate[prow] = row.degenerate
        self._present[prow] = True

    def set_row(self, row: GaussianRow) -> None:
        """Install a brand-new row (owner previously had none)."""
        self._ensure_capacity()
        prow = self.points.row(row.owner)
        if self._present[prow]:
            raise ValueError(f"id {row.owner} already has a row; use replace_row")
        if np.any(self.points.row_of[row.neighbor_ids] < 0):
            raise ValueError("row references dead neighbor ids")
        self._write_row(prow, row)
        self.n_rows += 1
        for j in row.neighbor_ids:
            self.reverse_index.setdefault(int(j), set()).add(row.owner)
        self.reverse_index.setdefault(row.owner, set())

    def replace_row(self, row: GaussianRow) -> set[int]:
        """Swap an owner's row; returns ids whose pairwise similarity changed.

        The changed set is the owner plus every partner gained, lost, or
        re-weighted. Replacing a row with identical content returns the empty
        set.
        """
        prow = self.points.row(row.owner)
        if not self._present[prow]:
            raise KeyError(f"no similarity row for id {row.owner}")
        if np.any(self.points.row_of[row.neighbor_ids] < 0):
            raise ValueError("row references dead neighbor ids")
        n_old = self._cnt[prow]
        old_ids = self._nbr_id[prow, :n_old].copy()
        old_p = self._nbr_p[prow, :n_old].copy()
        order = np.lexsort((row.neighbor_ids, row.sq_dists))
        new_ids = row.neighbor_ids[order]
        new_p = row.cond_prob[order]

        changed: set[int] = set()
        old_sorted = np.sort(old_ids)
        new_sorted = np.sort(new_ids)
        gained = np.setdiff1d(new_sorted, old_sorted, assume_unique=True)
        lost = np.setdiff1d(old_sorted, new_sorted, assume_unique=True)
        common = np.intersect1d(old_sorted, new_sorted, assume_unique=True)
        changed.update(int(j) for j in gained)
        changed.update(int(j) for j in lost)
        if common.shape[0]:
            po = old_p[np.argsort(old_ids, kind="stable")][np.searchsorted(old_sorted, common)]
            pn = new_p[np.argsort(new_ids, kind="stable")][np.searchsorted(new_sorted, common)]
            changed.update(int(j) for j in common[po != pn])
        if changed:
            changed.add(row.owner)

        for j in lost:
            self.reverse_index[int(j)].discard(row.owner)
        for j in gained:
            self.reverse_index.setdefault(int(j), set()).add(row.owner)
        self._write_row(prow, row)
        return changed

    def remove_row(self, owner: int) -> None:
        """Drop an owner's row and its reverse-index entries (not the partners')."""
        prow = self.points.row(owner)
        if not self._present[prow]:
            return
        n = self._cnt[prow]
        for j in self._nbr_id[prow, :n]:
            owners = self.reverse_index.get(int(j))
            if owners is not None:
                owners.discard(owner)
        self._present[prow] = False
        self._cnt[prow] = 0
        self._nbr_id[prow, :] = -1
        self.n_rows -= 1

    # -- row surgery for online updates -------------------------------------

    def _renormalize(self, prow: int) -> None:
        n = self._cnt[prow]
        if n == 0:
            return
        d2 = self._nbr_d2[prow, :n]
        sigma = self._sigma[prow]
        e = np.exp(-(d2 - d2.min()) / (2.0 * sigma * sigma))
        self._nbr_p[prow, :n] = e / e.sum()

    def evict_farthest_insert(self, owner: int, new_id: int, new_d2: float) -> int:
        """Replace the owner's farthest neighbor with new_id at new_d2.

        Keeps the row sorted, renormalizes with the existing bandwidth, and
        returns the evicted id. Requested precision is left untouched.
        """
        prow = self.points.row(owner)
        n = self._cnt[prow]
        if n == 0:
            raise ValueError("cannot insert into an empty row")
        evicted = int(self._nbr_id[prow, n - 1])
        self.reverse_index[evicted].discard(owner)
        pos = int(np.searchsorted(self._nbr_d2[prow, : n - 1], new_d2, side="right"))
        self._nbr_id[prow, pos + 1: n] = self._nbr_id[prow, pos: n - 1].copy()
        self._nbr_d2[prow, pos + 1: n] = self._nbr_d2[prow, pos: n - 1].copy()
        self._nbr_row[prow, pos + 1: n] = self._nbr_row[prow, pos: n - 1].copy()
        self._nbr_id[prow, pos] = new_id
        self._nbr_d2[prow, pos] = new_d2
        self._nbr_row[prow, pos] = self.points.row(new_id)
        self._exact[prow] = False
        self._renormalize(prow)
        self.reverse_index.setdefault(int(new_id), set()).add(owner)
        return evicted

    def drop_neighbor(self, owner: int, pid: int) -> None:
        """Remove pid from the owner's row, renormalize, charge 1/K precision."""
        prow = self.points.row(owner)
        n = self._cnt[prow]
        hits = np.flatnonzero(self._nbr_id[prow, :n] == pid)
        if hits.shape[0] == 0:
            return
        pos = int(hits[0])
        self._nbr_id[prow, pos: n - 1] = self._nbr_id[prow, pos + 1: n].copy()
        self._nbr_d2[prow, pos: n - 1] = self._nbr_d2[prow, pos + 1: n].copy()
        self._nbr_row[prow, pos: n - 1] = self._nbr_row[prow, pos + 1: n].copy()
        self._nbr_id[prow, n - 1] = -1
        self._cnt[prow] = n - 1
        self._rho[prow] = max(0.0, self._rho[prow] - 1.0 / self.K)
        self._exact[prow] = False
        self._renormalize(prow)

    def d_max_sq_of_rows(self) -> np.ndarray:
        """Per-point eviction thresholds, aligned with point rows; 0 if no row."""
        cap = self._cnt.shape[0]
        out = np.zeros(cap, dtype=np.float64)
        have = np.flatnonzero(self._present & (self._cnt > 0))
        out[have] = self._nbr_d2[have, self._cnt[have] - 1]
        return out

    # -- joint access --------------------------------------------------------

    def cond_prob_of(self, i: int, j: int) -> float:
        """p(j | i), zero when the link is absent."""
        prow = self.points.row(i)
        if not self._present[prow]:
            return 0.0
        n = self._cnt[prow]
        hits = np.flatnonzero(self._nbr_id[prow, :n] == j)
        if hits.shape[0] == 0:
            return 0.0
        return float(self._nbr_p[prow, hits[0]])


def joint_prob(store: SimilarityStore, i: int, j: int) -> float:
    """Symmetrized pair probability (p(j|i) + p(i|j)) / 2N; missing links are 0."""
    if i == j:
        return 0.0
    n = store.n_rows
    if n == 0:
        return 0.0
    return (store.cond_prob_of(i, j) + store.cond_prob_of(j, i)) / (2.0 * n)


def replace_row(store: SimilarityStore, row: GaussianRow) -> set[int]:
    return store.replace_row(row)


# ---------------------------------------------------------------------------
# bulk initialization
# ---------------------------------------------------------------------------

InitResult = namedtuple("InitResult", "store forest calibration")


def init_all(points: PointStore, perplexity: float, target_precision: float,
             seed: int = 0, sample: int | None = None) -> InitResult:
    """Build every similarity row at the requested precision.

    target_precision >= 1.0 runs the exact pipeline (brute-force
    neighborhoods); anything lower calibrates the forest for that recall and
    queries it. Returns the store together with the forest and the
    calibration outcome (None on the exact path).
    """
    store = SimilarityStore(points, perplexity)
    k = store.K
    n = points.n_live
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} live points for K = {k}")
    ids = points.live_ids()
    if target_precision >= 1.0:
        nbr_ids, nbr_d2 = knn_index.brute_force_batch(points, ids, k)
        cnt = np.full(n, nbr_ids.shape[1], dtype=np.int64)
        forest = knn_index.build_forest(points, 1, min(5, points.dim), seed)
        calibration = None
        exact = True
        rho = 1.0
    else:
        calibration, forest = knn_index.calibrate_with_forest(
            points, k, target_precision, sample=sample, seed=seed)
        queries = points.coords[points.row_of[ids]]
        nbr_ids, nbr_d2, cnt = knn_index.query_knn_batch(forest, queries, k,
                                                         exclude=ids)
        exact = False
        rho = float(target_precision)

    store._ensure_capacity()
    width = nbr_ids.shape[1]
    if np.any(cnt < 2):
        raise ValueError("query budget too small to form rows")
    rows = points.row_of[ids]
    if np.all(cnt == width):
        sigma, probs, degenerate = solve_sigma_batch(nbr_d2, perplexity)
        store._nbr_id[rows, :width] = nbr_ids
        store._nbr_row[rows, :width] = points.row_of[nbr_ids]
        store._nbr_d2[rows, :width] = nbr_d2
        store._nbr_p[rows, :width] = probs
        store._cnt[rows] = width
        store._sigma[rows] = sigma
        store._degenerate[rows] = degenerate
    else:
        # starved budgets can return short rows; perplexity is capped at the
        # row length there since a wider target is unreachable
        for i in range(n):
            prow = rows[i]
            m = int(cnt[i])
            s, p, dg = solve_sigma(nbr_d2[i, :m], min(perplexity, float(m)))
            store._nbr_id[prow, :m] = nbr_ids[i, :m]
            store._nbr_row[prow, :m] = points.row_of[nbr_ids[i, :m]]
            store._nbr_d2[prow, :m] = nbr_d2[i, :m]
            store._nbr_p[prow, :m] = p
            store._cnt[prow] = m
            store._sigma[prow] = s
            store._degenerate[prow] = dg
    store._rho[rows] = rho
    store._exact[rows] = exact
    store._present[rows] = True
    store.n_rows = n

    rev: dict[int, set[int]] = {int(i): set() for i in ids}
    for i in range(n):
        owner = int(ids[i])
        for j in nbr_ids[i, : cnt[i]]:
            rev[int(j)].add(owner)
    store.reverse_index = rev
    return InitResult(store, forest, calibration)
