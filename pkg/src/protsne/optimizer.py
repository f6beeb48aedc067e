"""Gradient descent on the 2-D embedding with tree-approximated repulsion.

The layout minimizes the divergence between the sparse high-dimensional
similarities and a Student-t low-dimensional kernel. Attraction walks the
stored directed neighbor edges; repulsion is estimated per iteration from an
insertion-built quadtree whose cells are accepted once they look small
relative to their distance (side^2 < theta^2 * d^2), with the normalization
accumulated in the same pass. theta = 0 degrades to the exact pairwise sum.

Exaggeration is per point: every point carries a decaying boost multiplying
its attractive term, and a global boost applies during the early iterations.
Newly inserted or re-refined points get their boost re-armed so their
neighborhood re-settles without restarting the whole layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .points import PointStore
from .similarity import SimilarityStore

MAX_TREE_DEPTH = 52
POSITION_LIMIT = 1e12


class DivergenceError(RuntimeError):
    """The layout produced non-finite or runaway coordinates."""


@dataclass
class OptimizerConfig:
    learning_rate: float = 200.0
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    momentum_switch: int = 250
    exaggeration: float = 4.0
    exaggeration_until: int = 250
    decay_rate: float = 0.05
    theta: float = 0.5
    init_std: float = 1e-4

    def validate(self) -> None:
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.theta:
            raise ValueError("theta must be >= 0")
        if self.exaggeration < 1.0:
            raise ValueError("exaggeration must be >= 1")
        if self.decay_rate < 0.0:
            raise ValueError("decay_rate must be >= 0")


# ---------------------------------------------------------------------------
# quadtree kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _qt_build(pts, child, cnt, sx, sy, ctr_x, ctr_y, half, max_depth):
    # root geometry is preset by the caller; returns node count, or -1 when
    # the arena is too small and the caller must retry with more room
    cap = child.shape[0]
    n_nodes = 1
    for p in range(pts.shape[0]):
        x = pts[p, 0]
        y = pts[p, 1]
        node = 0
        depth = 0
        while True:
            if child[node, 0] != -1:
                cnt[node] += 1
                sx[node] += x
                sy[node] += y
                q = 0
                if x >= ctr_x[node]:
                    q += 1
                if y >= ctr_y[node]:
                    q += 2
                node = child[node, q]
                depth += 1
                continue
            if cnt[node] == 0:
                cnt[node] = 1
                sx[node] = x
                sy[node] = y
                break
            if depth == max_depth:
                # coincident within cell resolution: aggregate
                cnt[node] += 1
                sx[node] += x
                sy[node] += y
                break
            # occupied leaf: split it, relocating the resident one level down
            if n_nodes + 4 > cap:
                return -1
            hq = half[node] * 0.5
            for q in range(4):
                c = n_nodes + q
                child[node, q] = c
                child[c, 0] = -1
                child[c, 1] = -1
                child[c, 2] = -1
                child[c, 3] = -1
                cnt[c] = 0
                sx[c] = 0.0
                sy[c] = 0.0
                ctr_x[c] = ctr_x[node] + (hq if q & 1 else -hq)
                ctr_y[c] = ctr_y[node] + (hq if q & 2 else -hq)
                half[c] = hq
            n_nodes += 4
            rx = sx[node] / cnt[node]
            ry = sy[node] / cnt[node]
            q = 0
            if rx >= ctr_x[node]:
                q += 1
            if ry >= ctr_y[node]:
                q += 2
            dest = child[node, q]
            cnt[dest] = cnt[node]
            sx[dest] = sx[node]
            sy[dest] = sy[node]
            # loop re-enters the internal branch and descends with the new point
    return n_nodes


@njit(cache=True)
def _qt_repulsion(pos, rows, child, cnt, sx, sy, half, theta2, out_rep, out_z):
    stack = np.empty(4 * MAX_TREE_DEPTH + 8, dtype=np.int64)
    for a in range(rows.shape[0]):
        i = rows[a]
        xi = pos[i, 0]
        yi = pos[i, 1]
        z = 0.0
        fx = 0.0
        fy = 0.0
        top = 1
        stack[0] = 0
        while top > 0:
            top -= 1
            node = stack[top]
            c = cnt[node]
            if c == 0:
                continue
            dx = xi - sx[node] / c
            dy = yi - sy[node] / c
            d2 = dx * dx + dy * dy
            side = 2.0 * half[node]
            if child[node, 0] == -1 or side * side < theta2 * d2:
                if d2 == 0.0:
                    z += c - 1.0
                else:
                    w = 1.0 / (1.0 + d2)
                    z += c * w
                    cw2 = c * w * w
                    fx += cw2 * dx
                    fy += cw2 * dy
            else:
                stack[top] = child[node, 0]
                stack[top + 1] = child[node, 1]
                stack[top + 2] = child[node, 2]
                stack[top + 3] = child[node, 3]
                top += 4
        out_rep[i, 0] = fx
        out_rep[i, 1] = fy
        out_z[i] = z


@njit(cache=True)
def _attraction(pos, nbr_row, nbr_p, nbr_cnt, rows, alpha, inv_2n, out):
    # each stored directed edge feeds both endpoints, which together assemble
    # the symmetrized pair probabilities without materializing them
    for a in range(rows.shape[0]):
        i = rows[a]
        xi = pos[i, 0]
        yi = pos[i, 1]
        ai = alpha[i]
        for t in range(nbr_cnt[i]):
            j = nbr_row[i, t]
            dx = xi - pos[j, 0]
            dy = yi - pos[j, 1]
            w = 1.0 / (1.0 + dx * dx + dy * dy)
            c = nbr_p[i, t] * inv_2n * w
            out[i, 0] += c * ai * dx
            out[i, 1] += c * ai * dy
            out[j, 0] -= c * alpha[j] * dx
            out[j, 1] -= c * alpha[j] * dy


@njit(cache=True)
def _exact_z(pos, rows):
    z = 0.0
    m = rows.shape[0]
    for a in range(m):
        i = rows[a]
        for b in range(a + 1, m):
            j = rows[b]
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            z += 2.0 / (1.0 + dx * dx + dy * dy)
    return z


def build_quadtree(positions: np.ndarray):
    """Insertion-build a quadtree over (m, 2) positions; returns node arrays."""
    m = positions.shape[0]
    cap = 8 * m + 256
    lo = positions.min(axis=0)
    hi = positions.max(axis=0)
    while True:
        child = np.full((cap, 4), -1, dtype=np.int64)
        cnt = np.zeros(cap, dtype=np.int64)
        sx = np.zeros(cap)
        sy = np.zeros(cap)
        ctr_x = np.zeros(cap)
        ctr_y = np.zeros(cap)
        half = np.zeros(cap)
        ctr_x[0] = 0.5 * (lo[0] + hi[0])
        ctr_y[0] = 0.5 * (lo[1] + hi[1])
        half[0] = 0.5 * max(hi[0] - lo[0], hi[1] - lo[1])
        n = _qt_build(positions, child, cnt, sx, sy, ctr_x, ctr_y, half,
                      MAX_TREE_DEPTH)
        if n >= 0:
            return child, cnt, sx, sy, ctr_x, ctr_y, half
        cap *= 2


# ---------------------------------------------------------------------------
# embedding state
# ---------------------------------------------------------------------------

class Embedding:
    """Per-point layout state: position, velocity, gain, exaggeration boost.

    Arrays are row-aligned with the PointStore so kernels index them directly.
    """

    def __init__(self, points: PointStore, seed: int = 0, init_std: float = 1e-4):
        self.points = points
        self.seed = int(seed)
        self.init_std = float(init_std)
        cap = points.capacity
        self.pos = np.zeros((cap, 2))
        self.vel = np.zeros((cap, 2))
        self.gains = np.ones((cap, 2))
        self.tau = np.ones(cap)
        self.iteration = 0
        self._rng = np.random.default_rng([self.seed, 977])
        live = points.live_rows()
        if live.shape[0]:
            self.pos[live] = self._rng.normal(0.0, self.init_std,
                                              size=(live.shape[0], 2))

    def ensure_capacity(self) -> None:
        cap = self.points.capacity
        if cap <= self.pos.shape[0]:
            return
        def grow2(arr, fill):
            out = np.full((cap, 2), fill, dtype=arr.dtype)
            out[: arr.shape[0]] = arr
            return out
        self.pos = grow2(self.pos, 0.0)
        self.vel = grow2(self.vel, 0.0)
        self.gains = grow2(self.gains, 1.0)
        out = np.ones(cap)
        out[: self.tau.shape[0]] = self.tau
        self.tau = out

    def born(self, pid: int, xy: np.ndarray, tau: float) -> None:
        """Fresh optimizer state for a point that just appeared."""
        self.ensure_capacity()
        r = self.points.row(pid)
        self.pos[r] = xy
        self.vel[r] = 0.0
        self.gains[r] = 1.0
        self.tau[r] = tau

    def reset_motion(self) -> None:
        live = self.points.live_rows()
        self.vel[live] = 0.0
        self.gains[live] = 1.0

    def reinitialize(self) -> None:
        """Re-draw all live positions from the init distribution."""
        live = self.points.live_rows()
        self.pos[live] = self._rng.normal(0.0, self.init_std,
                                          size=(live.shape[0], 2))
        self.vel[live] = 0.0
        self.gains[live] = 1.0
        self.iteration = 0

    def position_of(self, pid: int) -> np.ndarray:
        return self.pos[self.points.row(pid)].copy()

    def snapshot(self):
        """(ids ascending, positions) copies, safe to hand across threads."""
        ids = self.points.live_ids()
        return ids, self.pos[self.points.row_of[ids]].copy()


def repulsive_forces(emb: Embedding, theta: float):
    """Tree-approximated repulsion for every live point, plus the shared
    normalization accumulated in the same pass.

    Returns (forces, Z) with forces aligned to live ids ascending. theta = 0
    falls back to the exact all-pairs sum.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    pts = emb.points
    rows = pts.live_rows()
    m = rows.shape[0]
    rep = np.zeros((m, 2))
    z = np.zeros(m)
    if m == 0:
        return rep, 0.0
    compact = np.ascontiguousarray(emb.pos[rows])
    child, cnt, sx, sy, _, _, half = build_quadtree(compact)
    _qt_repulsion(compact, np.arange(m, dtype=np.int64), child, cnt, sx, sy,
                  half, theta * theta, rep, z)
    return rep, float(z.sum())


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Optimizer:
    def __init__(self, store: SimilarityStore, embedding: Embedding,
                 config: OptimizerConfig | None = None):
        self.store = store
        self.points = store.points
        self.emb = embedding
        self.config = config or OptimizerConfig()
        self.config.validate()

    # -- forces --------------------------------------------------------------

    def _alpha(self) -> np.ndarray:
        cfg = self.config
        base = cfg.exaggeration if self.emb.iteration < cfg.exaggeration_until else 1.0
        return np.maximum(base, self.emb.tau)

    def forces(self, theta: float | None = None, exaggerate: bool = True):
        """(attractive, repulsive, Z) over full row-capacity arrays."""
        st = self.store
        pts = self.points
        rows = pts.live_rows()
        cap = st._cnt.shape[0]
        attr = np.zeros((cap, 2))
        rep = np.zeros((cap, 2))
        if rows.shape[0] == 0:
            return attr, rep, 0.0
        self.emb.ensure_capacity()
        pos = self.emb.pos
        th = self.config.theta if theta is None else float(theta)
        local_rep, z = repulsive_forces(self.emb, th)
        rep[rows] = local_rep
        alpha = self._alpha() if exaggerate else np.ones(cap)
        inv_2n = 1.0 / (2.0 * st.n_rows)
        _attraction(pos, st._nbr_row, st._nbr_p, st._cnt, rows, alpha,
                    inv_2n, attr)
        return attr, rep, z

    def gradient(self, theta: float | None = None, exaggerate: bool = True) -> np.ndarray:
        attr, rep, z = self.forces(theta, exaggerate)
        if z <= 0.0:
            return 4.0 * attr
        return 4.0 * (attr - rep / z)

    # -- updates ---------------------------------------------------------------

    def step(self, n_iterations: int = 1) -> None:
        cfg = self.config
        emb = self.emb
        for _ in range(n_iterations):
            rows = self.points.live_rows()
            if rows.shape[0] == 0:
                emb.iteration += 1
                continue
            grad = self.gradient()[rows]
            mom = (cfg.momentum_early if emb.iteration < cfg.momentum_switch
                   else cfg.momentum_late)
            g = emb.gains[rows]
            v = emb.vel[rows]
            agree = np.sign(grad) == np.sign(v)
            g = np.where(agree, g * 0.8, g + 0.2)
            np.clip(g, 0.01, None, out=g)
            v = mom * v - cfg.learning_rate * g * grad
            emb.gains[rows] = g
            emb.vel[rows] = v
            emb.pos[rows] += v
            # boost decay toward 1
            decay = np.exp(-cfg.decay_rate)
            emb.tau[rows] = 1.0 + (emb.tau[rows] - 1.0) * decay
            emb.iteration += 1
            p = emb.pos[rows]
            if not np.all(np.isfinite(p)) or np.abs(p).max() > POSITION_LIMIT:
                raise DivergenceError(
                    f"layout diverged at iteration {emb.iteration}")

    def trigger_exaggeration(self, ids, value: float | None = None) -> None:
        """Re-arm the attraction boost for the given ids."""
        tau = self.config.exaggeration if value is None else float(value)
        row_of = self.points.row_of
        for pid in ids:
            r = row_of[pid]
            if r >= 0:
                self.emb.tau[r] = max(self.emb.tau[r], tau)

    # -- cost ---------------------------------------------------------------

    def kl_cost(self) -> float:
        return kl_cost(self.store, self.emb)


def _pair_probs(store: SimilarityStore):
    """Unique unordered pairs (by point row) and their joint probabilities."""
    pts = store.points
    rows = pts.live_rows()
    have = rows[store._present[rows]]
    if have.shape[0] == 0:
        return np.empty((0, 2), dtype=np.int64), np.empty(0)
    counts = store._cnt[have]
    owners = np.repeat(have, counts)
    total = int(counts.sum())
    partners = np.empty(total, dtype=np.int64)
    probs = np.empty(total)
    off = 0
    for r, c in zip(have, counts):
        partners[off: off + c] = store._nbr_row[r, :c]
        probs[off: off + c] = store._nbr_p[r, :c]
        off += c
    u = np.minimum(owners, partners)
    v = np.maximum(owners, partners)
    cap = store._cnt.shape[0]
    keys = u * cap + v
    uniq, inv = np.unique(keys, return_inverse=True)
    psum = np.zeros(uniq.shape[0])
    np.add.at(psum, inv, probs)
    pairs = np.stack([uniq // cap, uniq % cap], axis=1)
    return pairs, psum / (2.0 * store.n_rows)


def kl_cost(store: SimilarityStore, emb: Embedding) -> float:
    """Divergence between stored similarities and the current layout.

    Exact: the Student-t normalization is the full pairwise sum. Pairs absent
    from the sparse similarities contribute nothing.
    """
    pts = store.points
    rows = pts.live_rows()
    if rows.shape[0] < 2:
        return 0.0
    z = _exact_z(emb.pos, rows)
    pairs, p = _pair_probs(store)
    if pairs.shape[0] == 0:
        return 0.0
    d = emb.pos[pairs[:, 0]] - emb.pos[pairs[:, 1]]
    w = 1.0 / (1.0 + (d * d).sum(axis=1))
    mask = p > 0.0
    p = p[mask]
    w = w[mask]
    # pairs are unordered here; the divergence runs over ordered pairs
    return float(2.0 * np.sum(p * (np.log(p) - np.log(w) + np.log(z))))
