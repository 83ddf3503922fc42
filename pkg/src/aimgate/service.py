"""Live teaching sessions: the training loop behind a websocket protocol.

One session owns one training run. The loop runs in a worker thread; a
single expert client exchanges JSON frames over ``/session``. While the gate
holds expert control the loop blocks until the client supplies an action, so
a human can take the oracle's place without changing any training logic.

Message framing: every message is ``{"kind": ..., "seq": N, "payload": {...}}``
with server and client keeping independent strictly-increasing sequence
numbers. Kinds: state_frame, help_request, human_action, release, metrics,
session_control, error.
"""

from __future__ import annotations

import asyncio
import json
import logging
import queue
import threading
import time

from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .buffers import EXPERT
from .config import RunConfig
from .envs import CORRIDOR, FOURROOMS
from .spaces import ContinuousSpace, action_from_json
from .training import SessionEvents, StopTraining, aim_train

log = logging.getLogger("aimgate.service")

SCHEMA_VERSION = 1


def encode_frame(env, gate, awaiting_action: bool, phase: str) -> dict:
    """Top-down render model plus live gate telemetry for the console."""
    return {
        "schema": SCHEMA_VERSION,
        "world": env.render_doc(),
        "q_value": gate.last_q,
        "beta": gate.beta_view,
        "epsilon": gate.eps_view,
        "controller": gate.controller,
        "awaiting_action": awaiting_action,
        "phase": phase,
    }


class SessionRunner:
    """Owns the training thread and the two message queues."""

    def __init__(self, cfg: RunConfig, out_dir: str = "session_out",
                 pacing_hz: float = 10.0):
        self.cfg = cfg
        self.out_dir = out_dir
        self.pacing = 1.0 / pacing_hz if pacing_hz > 0 else 0.0
        self.outbound: "queue.Queue[str]" = queue.Queue(maxsize=4096)
        self.inbound: "queue.Queue[dict]" = queue.Queue()
        self._seq = 0
        self._stop = threading.Event()
        self._pause = threading.Event()
        self.client_connected = threading.Event()
        self.status = "idle"
        self.result = None
        self._thread: threading.Thread | None = None
        self._last_frame_time = 0.0

    # -- outbound ----------------------------------------------------------

    def send(self, kind: str, payload: dict) -> None:
        self._seq += 1
        doc = json.dumps({"kind": kind, "seq": self._seq, "payload": payload})
        try:
            self.outbound.put_nowait(doc)
        except queue.Full:
            # drop the oldest state frame to make room; control frames matter more
            try:
                self.outbound.get_nowait()
            except queue.Empty:
                pass
            self.outbound.put_nowait(doc)

    # -- expert wired to the inbound queue ----------------------------------

    def _await_human_action(self, env):
        """Blocks until the client supplies an action for the current state."""
        gate = self._gate_view
        self.send("state_frame", encode_frame(env, gate, True, self._phase))
        while True:
            if self._stop.is_set():
                raise StopTraining
            try:
                msg = self.inbound.get(timeout=0.2)
            except queue.Empty:
                continue
            kind = msg.get("kind")
            if kind == "human_action":
                try:
                    a = action_from_json(msg["payload"]["action"], env.space)
                    if isinstance(env.space, ContinuousSpace):
                        a = env.space.clamp(a)
                    elif not env.space.contains(a):
                        raise ValueError(f"action {a} out of range")
                except (KeyError, ValueError, TypeError) as exc:
                    self.send("error", {"reason": f"bad action: {exc}"})
                    continue
                return a
            if kind == "session_control":
                self._handle_control(msg.get("payload", {}))
            elif kind == "client_gone":
                self.send("session_control", {"state": "pause",
                                              "reason": "client disconnected"})
                self.client_connected.wait(timeout=0.5)
            else:
                self.send("error", {"reason": f"unexpected {kind!r} message"})

    def _handle_control(self, payload: dict) -> None:
        action = payload.get("action")
        if action == "stop":
            self._stop.set()
        elif action == "pause":
            self._pause.set()
            self.send("session_control", {"state": "paused"})
        elif action == "resume":
            self._pause.clear()
            self.send("session_control", {"state": "running"})

    # -- event hooks --------------------------------------------------------

    class _GateView:
        last_q = None
        beta_view = None
        eps_view = None
        controller = "agent"

    _gate_view = _GateView()
    _phase = "main"

    def _on_step(self, trainer, record: dict) -> None:
        gv = self._gate_view
        gv.last_q = record["q_value"]
        gv.beta_view = record["beta"]
        gv.eps_view = record["epsilon"]
        gv.controller = record["controller"]
        self._phase = record["phase"]
        self.send("state_frame", encode_frame(trainer.env, gv, False,
                                              record["phase"]))
        if record["release_event"]:
            self.send("release", {"step": record["step"]})
        if record["step"] % 50 == 0:
            self.send("metrics", {
                "expert_data_usage": trainer.gate.expert_steps,
                "total_data_usage": trainer.total_steps,
                "overall_intervention_rate": (
                    trainer.gate.expert_steps / max(trainer.total_steps, 1)),
            })
        while self._pause.is_set() and not self._stop.is_set():
            time.sleep(0.05)
        if self.pacing:
            now = time.monotonic()
            wait = self._last_frame_time + self.pacing - now
            if wait > 0:
                time.sleep(wait)
            self._last_frame_time = time.monotonic()

    def _on_request(self, trainer) -> None:
        self.send("help_request", {
            "step": trainer.total_steps,
            "q_value": self._gate_view.last_q,
            "beta": trainer.gate.beta,
        })

    def _should_stop(self) -> bool:
        return self._stop.is_set()

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        if self._thread is not None:
            return
        self.status = "running"
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self) -> None:
        events = SessionEvents(on_step=self._on_step,
                               on_request=self._on_request,
                               should_stop=self._should_stop)
        try:
            result, _ = aim_train(self.cfg, self.out_dir,
                                  expert=self._await_human_action,
                                  events=events, expert_kind="human")
            self.result = result
            self.status = "finished"
            self.send("session_control", {"state": "finished"})
        except Exception as exc:  # pragma: no cover - surfaced to the client
            log.exception("session crashed")
            self.status = "failed"
            self.send("error", {"reason": str(exc)})

    def stop(self, timeout: float = 10.0) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=timeout)
        self.status = "stopped" if self.result is None else self.status


def create_app(cfg: RunConfig, out_dir: str = "session_out",
               pacing_hz: float = 10.0, autostart: bool = True) -> FastAPI:
    app = FastAPI(title="aimgate session service")
    runner = SessionRunner(cfg, out_dir=out_dir, pacing_hz=pacing_hz)
    app.state.runner = runner

    @app.on_event("startup")
    async def _startup():
        if autostart:
            runner.start()

    @app.on_event("shutdown")
    async def _shutdown():
        runner.stop(timeout=3.0)

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok", "session": runner.status,
                "env": cfg.env_kind, "seed": cfg.seed}

    @app.websocket("/session")
    async def session_ws(ws: WebSocket):
        await ws.accept()
        if runner.client_connected.is_set():
            await ws.send_text(json.dumps(
                {"kind": "error", "seq": 0,
                 "payload": {"reason": "a client is already connected"}}))
            await ws.close()
            return
        runner.client_connected.set()
        runner.start()
        stop = asyncio.Event()

        async def pump_out():
            while not stop.is_set():
                try:
                    doc = runner.outbound.get_nowait()
                except queue.Empty:
                    await asyncio.sleep(0.01)
                    continue
                await ws.send_text(doc)

        async def pump_in():
            seq_seen = 0
            while True:
                raw = await ws.receive_text()
                try:
                    msg = json.loads(raw)
                    if not isinstance(msg, dict) or "kind" not in msg:
                        raise ValueError("missing kind")
                except ValueError as exc:
                    runner.send("error", {"reason": f"malformed message: {exc}"})
                    continue
                seq = msg.get("seq", 0)
                if isinstance(seq, int) and seq <= seq_seen:
                    runner.send("error", {"reason": "non-increasing seq"})
                seq_seen = seq if isinstance(seq, int) else seq_seen
                runner.inbound.put(msg)

        out_task = asyncio.create_task(pump_out())
        try:
            await pump_in()
        except WebSocketDisconnect:
            pass
        finally:
            stop.set()
            out_task.cancel()
            runner.client_connected.clear()
            runner.inbound.put({"kind": "client_gone"})

    try:
        from fastapi.staticfiles import StaticFiles
        import os
        static_dir = os.path.join(os.path.dirname(os.path.dirname(
            os.path.dirname(os.path.dirname(os.path.abspath(__file__))))),
            "frontend", "dist")
        if os.path.isdir(static_dir):
            app.mount("/", StaticFiles(directory=static_dir, html=True),
                      name="console")
    except Exception:  # pragma: no cover
        pass
    return app
