"""User-steered refinement: upgrade chosen neighborhoods to exact, live.

A single worker walks task queues in FIFO order, computing exact rows one
point at a time and handing them off for application at iteration
boundaries. Strategies only decide the visit order; the per-point work is
identical, so any order converges to the same exact store.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import knn_index
from .points import PointStore
from .similarity import GaussianRow, SimilarityStore, build_row

USER_SELECTION = "user_selection"
BREADTH_FIRST = "breadth_first"
DENSITY_BASED = "density_based"
RANDOM_GLOBAL = "random_global"
STRATEGIES = (USER_SELECTION, BREADTH_FIRST, DENSITY_BASED, RANDOM_GLOBAL)

RUNNING = "running"
PAUSED = "paused"
FINISHED = "finished"
CANCELLED = "cancelled"

BFS_BUDGET_FACTOR = 10


@dataclass
class RefinementTask:
    task_id: int
    description: str
    strategy: str
    target_ids: list[int]
    done_count: int = 0
    skipped_count: int = 0
    snapshot_ref: object = None
    state: str = RUNNING
    cursor: int = 0

    def progress(self) -> float:
        if not self.target_ids:
            return 1.0
        return self.done_count / len(self.target_ids)


def task_progress(task: RefinementTask) -> float:
    return task.progress()


def refine_point(points: PointStore, store: SimilarityStore,
                 pid: int) -> GaussianRow | None:
    """Exact neighborhood for one point; None when the point is gone."""
    if not points.has(pid):
        return None
    nbrs = knn_index.brute_force_knn(points, pid, store.K)
    return build_row(pid, nbrs, store.perplexity, 1.0)


def bfs_order(store: SimilarityStore, seeds, budget: int | None = None) -> list[int]:
    """Traversal order over the directed neighbor graph from the seeds.

    The frontier is a min-priority queue keyed by the original-space distance
    to the nearest already-visited point (lazily: every visit re-offers its
    out-edges, so the smallest offered key wins). Ties break by ascending id.
    Capped at budget points, seeds included.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("breadth-first refinement needs at least one seed")
    if budget is None:
        budget = BFS_BUDGET_FACTOR * len(seeds)
    visited: set[int] = set()
    out: list[int] = []
    pq: list[tuple[float, int]] = []

    def offer_edges(pid: int) -> None:
        if not store.has_row(pid):
            return
        row = store.row(pid)
        for j, d2 in zip(row.neighbor_ids, row.sq_dists):
            if int(j) not in visited:
                heapq.heappush(pq, (float(d2), int(j)))

    for s in seeds:
        if s in visited:
            continue
        visited.add(s)
        out.append(s)
        if len(out) >= budget:
            return out
    for s in out:
        offer_edges(s)
    while pq and len(out) < budget:
        _, j = heapq.heappop(pq)
        if j in visited:
            continue
        visited.add(j)
        out.append(j)
        offer_edges(j)
    return out


def density_order(store: SimilarityStore, candidates) -> list[int]:
    """Sparsest first: sort by bandwidth descending, ties by ascending id."""
    ids = np.asarray([int(c) for c in candidates], dtype=np.int64)
    if ids.shape[0] == 0:
        return []
    sig = np.empty(ids.shape[0])
    for k, pid in enumerate(ids):
        if not store.has_row(int(pid)):
            raise KeyError(f"no similarity row for id {pid}")
        sig[k] = store.sigma_of(int(pid))
    order = np.lexsort((ids, -sig))
    return [int(i) for i in ids[order]]


def apply_refined_row(store: SimilarityStore, optimizer, row: GaussianRow) -> set[int]:
    """Install a worker-produced row; stale rows are dropped.

    Returns the changed id-set (empty for no-ops and stale drops). When an
    optimizer is given, changed points get their attraction boost re-armed.
    """
    pts = store.points
    if not pts.has(row.owner):
        return set()
    if np.any(pts.row_of[row.neighbor_ids] < 0):
        return set()
    changed = store.replace_row(row)
    if optimizer is not None and changed:
        optimizer.trigger_exaggeration(changed)
    return changed


class RefinementWorker:
    """Single-threaded refinement engine with an optional background thread.

    pump() runs on the caller's thread for deterministic tests and the CLI;
    start()/stop() wrap the same loop in a daemon thread for the service.
    Computed rows go through the publish callback (by default an internal
    result queue drained by the coordinator).
    """

    def __init__(self, points: PointStore, store: SimilarityStore,
                 seed: int = 0, publish=None):
        self.points = points
        self.store = store
        self.seed = int(seed)
        self.results: deque[GaussianRow] = deque()
        self._publish = publish if publish is not None else self.results.append
        self._tasks: deque[RefinementTask] = deque()
        self.tasks_by_id: dict[int, RefinementTask] = {}
        self._ids = itertools.count(1)
        self._lock = threading.RLock()
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()

    # -- scheduling ---------------------------------------------------------

    def schedule(self, strategy: str, seed_ids=(), description: str = "",
                 snapshot_ref=None, budget: int | None = None) -> RefinementTask:
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        seed_list = [int(s) for s in seed_ids]
        for s in seed_list:
            if not self.points.has(s):
                raise ValueError(f"id {s} is not live")
        with self._lock:
            tid = next(self._ids)
            if strategy == USER_SELECTION:
                order = list(dict.fromkeys(seed_list))
            elif strategy == RANDOM_GLOBAL:
                rng = np.random.default_rng([self.seed, 23, tid])
                order = [int(i) for i in rng.permutation(self.points.live_ids())]
            elif strategy == BREADTH_FIRST:
                order = bfs_order(self.store, seed_list, budget)
            else:
                order = density_order(self.store, seed_list)
            task = RefinementTask(task_id=tid, description=description,
                                  strategy=strategy, target_ids=order,
                                  snapshot_ref=snapshot_ref)
            if not order:
                task.state = FINISHED
            self._tasks.append(task)
            self.tasks_by_id[tid] = task
            return task

    def pause(self, task_id: int) -> None:
        with self._lock:
            t = self.tasks_by_id[task_id]
            if t.state == RUNNING:
                t.state = PAUSED

    def resume(self, task_id: int) -> None:
        with self._lock:
            t = self.tasks_by_id[task_id]
            if t.state == PAUSED:
                t.state = RUNNING

    def cancel(self, task_id: int) -> None:
        with self._lock:
            t = self.tasks_by_id[task_id]
            if t.state in (RUNNING, PAUSED):
                t.state = CANCELLED

    def _next_task(self) -> RefinementTask | None:
        # FIFO over runnable tasks; paused ones stay queued but are skipped
        while self._tasks:
            head = self._tasks[0]
            if head.state in (FINISHED, CANCELLED):
                self._tasks.popleft()
                continue
            break
        for t in self._tasks:
            if t.state == RUNNING:
                return t
        return None

    # -- execution ----------------------------------------------------------

    def pump(self, max_points: int = 1) -> int:
        """Refine up to max_points points on the calling thread."""
        worked = 0
        while worked < max_points:
            with self._lock:
                task = self._next_task()
                if task is None:
                    return worked
                pid = task.target_ids[task.cursor]
                task.cursor += 1
                last = task.cursor == len(task.target_ids)
            if not self.points.has(pid):
                row = None
            elif self.store.has_row(pid) and self.store.row(pid).exact \
                    and self.store.rho_of(pid) >= 1.0:
                row = None          # already exact: counts as done
            else:
                row = refine_point(self.points, self.store, pid)
            with self._lock:
                if row is not None:
                    self._publish(row)
                else:
                    task.skipped_count += 1
                task.done_count += 1
                if last and task.state == RUNNING:
                    task.state = FINISHED
            worked += 1
        return worked

    def drain_results(self) -> list[GaussianRow]:
        with self._lock:
            out = list(self.results)
            self.results.clear()
        return out

    def idle(self) -> bool:
        with self._lock:
            return self._next_task() is None

    # -- thread mode ----------------------------------------------------------

    def start(self) -> None:
        if self._thread is not None and self._thread.is_alive():
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, daemon=True,
                                        name="refinement-worker")
        self._thread.start()

    def _loop(self) -> None:
        while not self._stop.is_set():
            if self.pump(1) == 0:
                time.sleep(0.002)

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None
