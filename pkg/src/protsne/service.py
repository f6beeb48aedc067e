"""Session coordinator and the WebSocket command/event protocol.

One session owns one optimizer loop, one refinement worker, and a command
queue. Every command that touches the engine is queued and executed at an
iteration boundary, so no snapshot can ever observe a half-applied
structural change; the acknowledgment carries the iteration at which the
command took effect. Subscribers get snapshots through latest-wins
mailboxes: a slow consumer silently skips to the freshest frame and the
optimizer never blocks on delivery.

Wire format: JSON envelopes {type, seq, payload} on the text channel; bulk
arrays ride binary frames of u32 seq + u8 kind + little-endian f32 payload,
correlated to their announcing envelope by seq (kind 1 = positions,
2 = field raster, 3 = per-point precision).
"""

from __future__ import annotations

import itertools
import json
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import datasets, fields
from .dynamics import DynamicState, StreamWindow
from .optimizer import DivergenceError, OptimizerConfig
from .points import PointStore
from .steering import (RefinementWorker, STRATEGIES, USER_SELECTION,
                       apply_refined_row)

FRAME_POSITIONS = 1
FRAME_FIELD = 2
FRAME_RHO = 3

COMMAND_QUEUE_LIMIT = 256
COMMAND_TIMEOUT = 30.0
DEFAULT_STRIDE = 10
DEFAULT_IDLE_TIMEOUT = 300.0

IDLE = "idle"
RUNNING = "running"
PAUSED = "paused"
BRUSHING = "brushing"


class CommandError(Exception):
    """Protocol-level rejection with a wire error code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def pack_frame(seq: int, kind: int, payload: np.ndarray) -> bytes:
    data = np.ascontiguousarray(payload, dtype="<f4")
    return struct.pack("<IB", seq, kind) + data.tobytes(order="C")


class Mailbox:
    """Depth-one, latest-wins event slot."""

    def __init__(self):
        self._cv = threading.Condition()
        self._item = None

    def put(self, item) -> None:
        with self._cv:
            self._item = item
            self._cv.notify_all()

    def take(self, timeout: float | None = None):
        with self._cv:
            if self._item is None:
                self._cv.wait(timeout)
            item = self._item
            self._item = None
            return item


@dataclass
class _Pending:
    fn: object
    done: threading.Event = field(default_factory=threading.Event)
    result: dict | None = None
    error: Exception | None = None


class Session:
    """All engine access is funneled through iteration boundaries.

    With auto_loop=True (the service default) a daemon thread runs the
    optimizer and drains the queue. With auto_loop=False nothing runs until
    the caller pumps run_iterations(), and commands apply inline — this mode
    is what the CLI and the deterministic tests use.
    """

    def __init__(self, session_id: str, *, perplexity: float = 30.0,
                 precision: float = 0.8, seed: int = 0,
                 config: OptimizerConfig | None = None,
                 stride: int = DEFAULT_STRIDE, auto_loop: bool = True,
                 window_duration: float | None = None,
                 include_kl: bool = False,
                 pause_optimizer_on_brush: bool = False):
        self.session_id = session_id
        self.perplexity = float(perplexity)
        self.precision = float(precision)
        self.seed = int(seed)
        self.config = config or OptimizerConfig()
        self.stride = int(stride)
        self.auto_loop = bool(auto_loop)
        self.include_kl = bool(include_kl)
        self.pause_optimizer_on_brush = bool(pause_optimizer_on_brush)

        self.state = IDLE
        self.engine: DynamicState | None = None
        self.worker: RefinementWorker | None = None
        self.window: StreamWindow | None = None
        self.window_duration = window_duration
        self.selection: list[int] = []
        self.last_activity = time.monotonic()

        self._seq = itertools.count(1)
        self._cmds: deque[_Pending] = deque()
        self._cmd_lock = threading.Lock()
        self._boundary_lock = threading.RLock()
        self._rows = deque()
        self._subs: list[Mailbox] = []
        self._inserted_since_emit: list[int] = []
        self._divergence: str | None = None
        self._loop_thread: threading.Thread | None = None
        self._stop = threading.Event()

    # ------------------------------------------------------------------
    # plumbing
    # ------------------------------------------------------------------

    def next_seq(self) -> int:
        return next(self._seq)

    def _submit(self, fn) -> dict:
        """Run fn at the next iteration boundary and return its payload."""
        self.last_activity = time.monotonic()
        pending = _Pending(fn)
        with self._cmd_lock:
            if len(self._cmds) >= COMMAND_QUEUE_LIMIT:
                raise CommandError("overloaded", "command queue is full")
            self._cmds.append(pending)
        if not self._loop_alive():
            self._boundary()
        if not pending.done.wait(COMMAND_TIMEOUT):
            raise CommandError("overloaded", "command timed out at the boundary")
        if pending.error is not None:
            raise pending.error
        return pending.result if pending.result is not None else {}

    def _loop_alive(self) -> bool:
        t = self._loop_thread
        return t is not None and t.is_alive()

    def _boundary(self) -> None:
        """Apply queued commands and worker rows; runs between iterations."""
        with self._boundary_lock:
            while True:
                with self._cmd_lock:
                    if not self._cmds:
                        break
                    pending = self._cmds.popleft()
                try:
                    pending.result = pending.fn()
                except CommandError as e:
                    pending.error = e
                except (KeyError, ValueError) as e:
                    pending.error = CommandError("bad_request", str(e))
                except Exception as e:             # noqa: BLE001
                    pending.error = CommandError("bad_request", repr(e))
                finally:
                    pending.done.set()
            if self.engine is not None:
                while self._rows:
                    row = self._rows.popleft()
                    apply_refined_row(self.engine.store, self.engine.optimizer,
                                      row)

    def _loop(self) -> None:
        while not self._stop.is_set():
            self._boundary()
            active = self.state == RUNNING or (
                self.state == BRUSHING and not self.pause_optimizer_on_brush)
            if self.engine is None or not active:
                time.sleep(0.002)
                continue
            try:
                self.engine.optimizer.step(1)
            except DivergenceError as e:
                self._divergence = str(e)
                self.state = PAUSED
                continue
            if self.state == RUNNING:
                it = self.engine.emb.iteration
                if self.stride > 0 and it % self.stride == 0:
                    self._emit_snapshot()

    def run_iterations(self, n: int) -> None:
        """Manual drive: n iterations with boundaries and emission."""
        if self.engine is None:
            raise CommandError("bad_state", "no dataset loaded")
        for _ in range(n):
            self._boundary()
            if self.state == RUNNING or (self.state == BRUSHING
                                         and not self.pause_optimizer_on_brush):
                self.engine.optimizer.step(1)
                if self.state == RUNNING:
                    it = self.engine.emb.iteration
                    if self.stride > 0 and it % self.stride == 0:
                        self._emit_snapshot()
        self._boundary()

    def close(self) -> None:
        self._stop.set()
        if self._loop_thread is not None:
            self._loop_thread.join(timeout=2.0)
            self._loop_thread = None
        if self.worker is not None:
            self.worker.stop()

    # ------------------------------------------------------------------
    # snapshots
    # ------------------------------------------------------------------

    def _snapshot_bundle(self) -> tuple[dict, list[bytes]]:
        eng = self.engine
        ids, pos = eng.emb.snapshot()
        rows = eng.points.row_of[ids]
        rho = eng.store._rho[rows].copy()
        seq = self.next_seq()
        tasks = []
        if self.worker is not None:
            for t in self.worker.tasks_by_id.values():
                tasks.append({"task_id": t.task_id, "description": t.description,
                              "strategy": t.strategy, "state": t.state,
                              "done": t.done_count, "total": len(t.target_ids),
                              "progress": t.progress()})
        payload = {
            "iteration": eng.emb.iteration,
            "n": int(ids.shape[0]),
            "ids": [int(i) for i in ids],
            "inserted": list(self._inserted_since_emit),
            "tasks": tasks,
            "state": self.state,
            "positions_frame": seq,
            "rho_frame": seq,
        }
        if self.include_kl and ids.shape[0] <= 10000:
            payload["kl"] = eng.optimizer.kl_cost()
        if self._divergence:
            payload["diverged"] = self._divergence
        event = {"type": "snapshot", "seq": seq, "payload": payload}
        frames = [pack_frame(seq, FRAME_POSITIONS, pos),
                  pack_frame(seq, FRAME_RHO, rho)]
        return event, frames

    def _emit_snapshot(self) -> None:
        if not self._subs:
            self._inserted_since_emit.clear()
            return
        event, frames = self._snapshot_bundle()
        self._inserted_since_emit.clear()
        for box in self._subs:
            box.put((event, frames))

    # ------------------------------------------------------------------
    # command surface
    # ------------------------------------------------------------------

    def handle_command(self, msg: dict) -> tuple[dict, list[bytes]]:
        """Execute one decoded envelope; returns (reply envelope, frames)."""
        if not isinstance(msg, dict):
            raise CommandError("bad_request", "envelope must be an object")
        cmd = msg.get("type")
        seq = msg.get("seq")
        payload = msg.get("payload") or {}
        if not isinstance(cmd, str) or not isinstance(payload, dict):
            raise CommandError("bad_request", "envelope needs type and payload")
        handler = getattr(self, f"_cmd_{cmd}", None)
        if handler is None:
            raise CommandError("bad_request", f"unknown command {cmd!r}")
        out, frames = handler(payload)
        out.setdefault("command", cmd)
        if seq is not None:
            out["command_seq"] = seq
        reply = {"type": "reply", "seq": self.next_seq(), "payload": out}
        return reply, frames

    def _require_engine(self) -> DynamicState:
        if self.engine is None:
            raise CommandError("bad_state", "no dataset loaded")
        return self.engine

    # -- lifecycle ------------------------------------------------------

    def _cmd_load(self, payload: dict):
        if self.engine is not None:
            raise CommandError("bad_state", "session already has a dataset")
        if "path" in payload:
            points = datasets.load_points(payload["path"])
        elif "coords" in payload:
            coords = np.asarray(payload["coords"], dtype=np.float64)
            points = PointStore.from_array(coords, payload.get("labels"))
        elif "synthetic" in payload:
            spec = payload["synthetic"]
            coords, labels = datasets.make_clusters(
                int(spec.get("n", 1000)), int(spec.get("dim", 16)),
                clusters=int(spec.get("clusters", 10)),
                separation=float(spec.get("separation", 6.0)),
                cluster_std=float(spec.get("cluster_std", 1.0)),
                seed=int(spec.get("seed", self.seed)))
            points = PointStore.from_array(coords, labels)
        else:
            raise CommandError("bad_request", "load needs path, coords, or synthetic")
        if "perplexity" in payload:
            self.perplexity = float(payload["perplexity"])
        if "precision" in payload:
            self.precision = float(payload["precision"])
        if "window" in payload:
            self.window_duration = float(payload["window"])
        self.engine = DynamicState.initialize(points, self.perplexity,
                                              self.precision, seed=self.seed,
                                              config=self.config)
        self.worker = RefinementWorker(points, self.engine.store,
                                       seed=self.seed,
                                       publish=self._rows.append)
        if self.auto_loop:
            self.worker.start()
        calib = self.engine.calibration
        info = {"ok": True, "n": points.n_live, "dim": points.dim,
                "perplexity": self.perplexity, "precision": self.precision,
                "iteration": 0}
        if calib is not None:
            info["calibration"] = {"trees": calib.chosen_trees,
                                   "leaves": calib.chosen_leaves,
                                   "measured_recall": calib.measured_recall,
                                   "reached_target": calib.reached_target}
        return info, []

    def _cmd_start(self, payload: dict):
        self._require_engine()
        if self.state != IDLE:
            raise CommandError("bad_state", f"cannot start while {self.state}")
        self.state = RUNNING
        if self.auto_loop and not self._loop_alive():
            self._stop.clear()
            self._loop_thread = threading.Thread(target=self._loop, daemon=True,
                                                 name=f"optimizer-{self.session_id}")
            self._loop_thread.start()
        return {"ok": True, "iteration": self.engine.emb.iteration}, []

    def _cmd_pause(self, payload: dict):
        if self.state not in (RUNNING, BRUSHING):
            raise CommandError("bad_state", f"cannot pause while {self.state}")
        def apply():
            self.state = PAUSED
            return {"ok": True, "iteration": self.engine.emb.iteration}
        return self._submit(apply), []

    def _cmd_resume(self, payload: dict):
        if self.state != PAUSED:
            raise CommandError("bad_state", f"cannot resume while {self.state}")
        def apply():
            self.state = RUNNING
            return {"ok": True, "iteration": self.engine.emb.iteration}
        return self._submit(apply), []

    def _cmd_set_config(self, payload: dict):
        self._require_engine()
        def apply():
            cfg = self.engine.optimizer.config
            for key in ("learning_rate", "momentum_early", "momentum_late",
                        "exaggeration", "decay_rate", "theta"):
                if key in payload:
                    setattr(cfg, key, float(payload[key]))
            for key in ("momentum_switch", "exaggeration_until"):
                if key in payload:
                    setattr(cfg, key, int(payload[key]))
            cfg.validate()
            if "stride" in payload:
                self.stride = max(1, int(payload["stride"]))
            if "include_kl" in payload:
                self.include_kl = bool(payload["include_kl"])
            if "pause_optimizer_on_brush" in payload:
                self.pause_optimizer_on_brush = bool(payload["pause_optimizer_on_brush"])
            if "window" in payload:
                self.window_duration = float(payload["window"])
                if self.window is not None:
                    self.window.duration = self.window_duration
            return {"ok": True, "iteration": self.engine.emb.iteration}
        return self._submit(apply), []

    # -- selection and refinement ------------------------------------------

    def _cmd_brush(self, payload: dict):
        self._require_engine()
        final = bool(payload.get("final", True))
        def apply():
            eng = self.engine
            if "ids" in payload:
                sel = [int(i) for i in payload["ids"]]
                for pid in sel:
                    if not eng.points.has(pid):
                        raise CommandError("bad_request", f"id {pid} is not live")
            elif "rect" in payload:
                x0, y0, x1, y1 = (float(v) for v in payload["rect"])
                ids, pos = eng.emb.snapshot()
                lo_x, hi_x = min(x0, x1), max(x0, x1)
                lo_y, hi_y = min(y0, y1), max(y0, y1)
                inside = ((pos[:, 0] >= lo_x) & (pos[:, 0] <= hi_x)
                          & (pos[:, 1] >= lo_y) & (pos[:, 1] <= hi_y))
                sel = [int(i) for i in ids[inside]]
            else:
                raise CommandError("bad_request", "brush needs ids or rect")
            self.selection = sel
            if not final and self.state == RUNNING:
                self.state = BRUSHING
            elif final and self.state == BRUSHING:
                self.state = RUNNING
            return {"ok": True, "selected": sel, "count": len(sel),
                    "state": self.state,
                    "iteration": eng.emb.iteration}
        return self._submit(apply), []

    def _cmd_refine(self, payload: dict):
        self._require_engine()
        strategy = payload.get("strategy", USER_SELECTION)
        if strategy not in STRATEGIES:
            raise CommandError("bad_request", f"unknown strategy {strategy!r}")
        def apply():
            ids = payload.get("ids")
            seeds = [int(i) for i in ids] if ids is not None else list(self.selection)
            snapshot_ref = self.engine.emb.snapshot()
            task = self.worker.schedule(
                strategy, seeds, description=payload.get("description", ""),
                snapshot_ref=snapshot_ref, budget=payload.get("budget"))
            return {"ok": True, "task_id": task.task_id,
                    "size": len(task.target_ids), "state": task.state,
                    "iteration": self.engine.emb.iteration}
        return self._submit(apply), []

    def _cmd_task(self, payload: dict):
        """Pause, resume, or cancel a refinement task."""
        self._require_engine()
        action = payload.get("action")
        tid = payload.get("task_id")
        def apply():
            if tid not in self.worker.tasks_by_id:
                raise CommandError("bad_request", f"unknown task {tid}")
            if action == "pause":
                self.worker.pause(tid)
            elif action == "resume":
                self.worker.resume(tid)
            elif action == "cancel":
                self.worker.cancel(tid)
            else:
                raise CommandError("bad_request", f"unknown task action {action!r}")
            t = self.worker.tasks_by_id[tid]
            return {"ok": True, "task_id": tid, "state": t.state,
                    "progress": t.progress(),
                    "iteration": self.engine.emb.iteration}
        return self._submit(apply), []

    # -- structural mutations ---------------------------------------------

    def _cmd_insert(self, payload: dict):
        self._require_engine()
        if "vector" not in payload:
            raise CommandError("bad_request", "insert needs a vector")
        def apply():
            pid = self.engine.insert(payload["vector"], payload.get("label"))
            self._inserted_since_emit.append(pid)
            return {"ok": True, "id": pid,
                    "iteration": self.engine.emb.iteration}
        return self._submit(apply), []

    def _cmd_delete(self, payload: dict):
        self._require_engine()
        if "id" not in payload:
            raise CommandError("bad_request", "delete needs an id")
        def apply():
            self.engine.delete(int(payload["id"]))
            return {"ok": True, "id": int(payload["id"]),
                    "iteration": self.engine.emb.iteration}
        return self._submit(apply), []

    def _cmd_redim(self, payload: dict):
        self._require_engine()
        def apply():
            eng = self.engine
            if "path" in payload:
                new_pts = datasets.load_points(payload["path"])
                eng.redim(new_pts)
            elif "coords" in payload:
                coords = np.asarray(payload["coords"], dtype=np.float64)
                ids = eng.points.live_ids()
                if coords.shape[0] != ids.shape[0]:
                    raise CommandError("bad_request",
                                       "coords row count must match live points")
                eng.redim({int(i): coords[k] for k, i in enumerate(ids)})
            else:
                raise CommandError("bad_request", "redim needs path or coords")
            self.worker.store = eng.store
            return {"ok": True, "dim": eng.points.dim,
                    "iteration": eng.emb.iteration}
        return self._submit(apply), []

    def _cmd_stream_tick(self, payload: dict):
        self._require_engine()
        if "now" not in payload:
            raise CommandError("bad_request", "stream_tick needs now")
        def apply():
            if self.window is None:
                duration = self.window_duration
                if duration is None:
                    raise CommandError("bad_state", "no stream window configured")
                self.window = StreamWindow(duration=duration)
            arrivals = [np.asarray(v, dtype=np.float64)
                        for v in payload.get("arrivals", [])]
            labels = payload.get("labels")
            inserted, expired = self.engine.tick(self.window,
                                                 float(payload["now"]),
                                                 arrivals, labels)
            self._inserted_since_emit.extend(inserted)
            return {"ok": True, "inserted": inserted, "expired": expired,
                    "live": self.engine.points.n_live,
                    "iteration": self.engine.emb.iteration}
        return self._submit(apply), []

    # -- reads ---------------------------------------------------------------

    def _cmd_subscribe(self, payload: dict):
        self._require_engine()
        def apply():
            box = Mailbox()
            self._subs.append(box)
            event, frames = self._snapshot_bundle()
            return {"ok": True, "snapshot": event["payload"],
                    "_frames": frames,
                    "iteration": self.engine.emb.iteration}
        out = self._submit(apply)
        frames = out.pop("_frames")
        return out, frames

    def _cmd_get_fields(self, payload: dict):
        self._require_engine()
        h = float(payload.get("h", 1.0))
        names = payload.get("fields", ["density"])
        width = int(payload.get("width", fields.DEFAULT_GRID))
        height = int(payload.get("height", fields.DEFAULT_GRID))
        def apply():
            eng = self.engine
            rows = eng.points.live_rows()
            if rows.shape[0] == 0:
                raise CommandError("bad_state", "no live points")
            spec = fields.GridSpec.fit(eng.emb.pos[rows], h, width, height)
            dens = fields.density_field(eng.emb, h, spec)
            out_frames = []
            described = []
            for name in names:
                if name == "density":
                    grid = dens
                elif name == "selection":
                    sel = payload.get("selection", self.selection)
                    grid = fields.selection_field(eng.emb, sel, h, spec, dens)
                elif name == "approximation":
                    ids = eng.points.live_ids()
                    rho = eng.store._rho[eng.points.row_of[ids]]
                    grid = fields.approximation_field(eng.emb, rho, h, spec, dens)
                else:
                    raise CommandError("bad_request", f"unknown field {name!r}")
                fseq = self.next_seq()
                out_frames.append(pack_frame(fseq, FRAME_FIELD,
                                             grid.values.astype(np.float64)))
                described.append({"name": name, "frame": fseq,
                                  "width": spec.width, "height": spec.height})
            return {"ok": True, "fields": described,
                    "grid": {"origin_x": spec.origin_x, "origin_y": spec.origin_y,
                             "scale": spec.scale, "width": spec.width,
                             "height": spec.height},
                    "h": h, "iteration": eng.emb.iteration,
                    "_frames": out_frames}
        out = self._submit(apply)
        frames = out.pop("_frames")
        return out, frames

    def _cmd_get_records(self, payload: dict):
        self._require_engine()
        ids = payload.get("ids", [])
        def apply():
            eng = self.engine
            records = []
            for pid in ids:
                pid = int(pid)
                if not eng.points.has(pid):
                    continue
                records.append({"id": pid,
                                "label": eng.points.labels.get(pid),
                                "vector": [float(v) for v in eng.points.get(pid)],
                                "rho": (eng.store.rho_of(pid)
                                        if eng.store.has_row(pid) else 0.0)})
            return {"ok": True, "records": records,
                    "iteration": eng.emb.iteration}
        return self._submit(apply), []

    def _cmd_status(self, payload: dict):
        eng = self.engine
        info = {"ok": True, "state": self.state,
                "loaded": eng is not None,
                "n": eng.points.n_live if eng else 0,
                "iteration": eng.emb.iteration if eng else 0,
                "selection_count": len(self.selection)}
        if self._divergence:
            info["diverged"] = self._divergence
        return info, []


class SessionRegistry:
    """Session table with idle garbage collection."""

    def __init__(self, idle_timeout: float = DEFAULT_IDLE_TIMEOUT, **defaults):
        self.idle_timeout = float(idle_timeout)
        self.defaults = defaults
        self._sessions: dict[str, Session] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    def create(self, **overrides) -> Session:
        with self._lock:
            sid = f"s{next(self._ids)}"
            kwargs = dict(self.defaults)
            kwargs.update(overrides)
            session = Session(sid, **kwargs)
            self._sessions[sid] = session
            return session

    def get(self, session_id: str) -> Session:
        with self._lock:
            s = self._sessions.get(session_id)
        if s is None:
            raise CommandError("no_session", f"unknown session {session_id!r}")
        return s

    def drop(self, session_id: str) -> None:
        with self._lock:
            s = self._sessions.pop(session_id, None)
        if s is not None:
            s.close()

    def gc(self, now: float | None = None) -> list[str]:
        now = time.monotonic() if now is None else now
        with self._lock:
            stale = [sid for sid, s in self._sessions.items()
                     if now - s.last_activity > self.idle_timeout]
        for sid in stale:
            self.drop(sid)
        return stale

    def close_all(self) -> None:
        with self._lock:
            sessions = list(self._sessions.values())
            self._sessions.clear()
        for s in sessions:
            s.close()


# ---------------------------------------------------------------------------
# WebSocket transport
# ---------------------------------------------------------------------------

def error_reply(seq_source, code: str, message: str,
                command_seq=None) -> dict:
    payload = {"ok": False, "code": code, "message": message}
    if command_seq is not None:
        payload["command_seq"] = command_seq
    seq = seq_source.next_seq() if seq_source is not None else 0
    return {"type": "error", "seq": seq, "payload": payload}


def build_app(registry: SessionRegistry | None = None, **session_defaults):
    """FastAPI application exposing the session protocol at /session."""
    from fastapi import FastAPI, WebSocket, WebSocketDisconnect
    import anyio

    reg = registry or SessionRegistry(**session_defaults)
    app = FastAPI()
    app.state.registry = reg

    @app.websocket("/session")
    async def session_endpoint(ws: WebSocket):
        await ws.accept()
        bound: Session | None = None
        box = Mailbox()
        stop = threading.Event()
        send_lock = anyio.Lock()

        async def push_loop():
            while not stop.is_set():
                bundle = await anyio.to_thread.run_sync(box.take, 0.05)
                if bundle is None:
                    continue
                event, frames = bundle
                async with send_lock:
                    await ws.send_text(json.dumps(event))
                    for frame in frames:
                        await ws.send_bytes(frame)

        async def recv_loop():
            nonlocal bound
            while True:
                text = await ws.receive_text()
                try:
                    msg = json.loads(text)
                except json.JSONDecodeError:
                    reply = error_reply(bound, "bad_request", "malformed JSON")
                    async with send_lock:
                        await ws.send_text(json.dumps(reply))
                    continue
                cseq = msg.get("seq") if isinstance(msg, dict) else None
                try:
                    target = bound
                    if isinstance(msg, dict) and "session" in msg:
                        target = reg.get(str(msg["session"]))
                    if isinstance(msg, dict) and msg.get("type") == "load" \
                            and target is None:
                        target = reg.create()
                        bound = target
                        bound._subs.append._self = None  # noqa: B018 - placeholder
                    if target is None:
                        raise CommandError("no_session",
                                           "no session bound; send load first")
                    reply, frames = await anyio.to_thread.run_sync(
                        target.handle_command, msg)
                    if bound is None:
                        bound = target
                    if msg.get("type") == "load":
                        reply["payload"]["session"] = target.session_id
                    if msg.get("type") == "subscribe":
                        target._subs[-1:] = [box] if box not in target._subs \
                            else target._subs[-1:]
                except CommandError as e:
                    reply, frames = error_reply(bound, e.code, str(e), cseq), []
                async with send_lock:
                    await ws.send_text(json.dumps(reply))
                    for frame in frames:
                        await ws.send_bytes(frame)

        try:
            async with anyio.create_task_group() as tg:
                tg.start_soon(push_loop)
                try:
                    await recv_loop()
                except WebSocketDisconnect:
                    pass
                finally:
                    stop.set()
                    tg.cancel_scope.cancel()
        finally:
            stop.set()

    return app
