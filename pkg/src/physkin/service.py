"""HTTP/WebSocket service. The CLI talks to this app in-process by
default; ``physkin serve`` runs it as a real server for the browser viewer.

REST endpoints wrap the offline pipeline commands 1:1. The /ws endpoint
streams an interactive simulation: one thread owns the simulation state,
client commands are applied between steps in arrival order, and each
client gets an individual bounded frame queue (slow clients drop frames,
they never stall the simulation).
"""

import asyncio
import threading
import time
import traceback
from collections import deque

import numpy as np
from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from pydantic import BaseModel, ConfigDict

import physkin
from physkin import pipeline, protocol
from physkin.config import RunConfig


class SampleRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    config: RunConfig


class TrainRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    config: RunConfig
    resume: str | None = None


class EvalRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    config: RunConfig
    checkpoint: str
    handle: int | None = None


class AnimateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    config: RunConfig
    checkpoint: str
    script: list = []
    steps: int = 60
    frames_format: str = "json"


class StreamingSim:
    """Simulation thread plus per-client frame fanout for /ws."""

    def __init__(self, session: pipeline.SimSession, frame_rate: float):
        self.session = session
        self.period = 1.0 / frame_rate
        self._commands = deque()
        self._lock = threading.Lock()
        self._clients = {}           # id -> (asyncio loop, asyncio.Queue)
        self._next_client = 0
        self._drag_ids = {}          # wire id -> system drag id
        self.paused = False
        self._stop = threading.Event()
        self._thread = None

    # -- client registry (called from the async side) ------------------

    def attach(self, loop, queue) -> int:
        with self._lock:
            cid = self._next_client
            self._next_client += 1
            self._clients[cid] = (loop, queue)
        return cid

    def detach(self, cid):
        with self._lock:
            self._clients.pop(cid, None)

    def submit(self, msg: dict):
        with self._lock:
            self._commands.append(msg)

    # -- the simulation thread -----------------------------------------

    def start(self):
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)

    def _apply(self, msg):
        sess = self.session
        kind = msg["type"]
        if kind == "pin":
            verts = [int(v) for v in msg["vertices"]]
            target = np.asarray(msg["target"], dtype=np.float64)
            rest = sess.mesh.vertices[verts]
            offset = target - rest.mean(axis=0)
            for v in verts:
                # cluster pin: every vertex keeps its offset from the
                # cluster centroid so the pinned patch is not crushed
                sess.system.set_pin(v, sess.mesh.vertices[v] + offset,
                                    stiffness=float(msg["stiffness"]))
        elif kind == "drag":
            wid = int(msg["id"])
            target = np.asarray(msg["target"], dtype=np.float64)
            if wid in self._drag_ids:
                sess.system.move_drag(self._drag_ids[wid], target)
            else:
                self._drag_ids[wid] = sess.system.set_drag(
                    np.asarray(msg["point"], dtype=np.float64), target,
                    stiffness=float(msg["stiffness"]))
        elif kind == "release":
            wid = int(msg["id"])
            if wid in self._drag_ids:
                sess.system.clear_drag(self._drag_ids.pop(wid))
        elif kind == "reset":
            self._drag_ids.clear()
            sess.reset()
        elif kind == "pause":
            self.paused = True
        elif kind == "resume":
            self.paused = False

    def _broadcast(self, text: str):
        with self._lock:
            clients = list(self._clients.values())
        for loop, queue in clients:
            def push(q=queue, t=text):
                if q.full():
                    try:
                        q.get_nowait()   # drop the oldest frame
                    except asyncio.QueueEmpty:
                        pass
                q.put_nowait(t)
            loop.call_soon_threadsafe(push)

    def _run(self):
        sess = self.session
        while not self._stop.is_set():
            tick = time.perf_counter()
            while True:
                with self._lock:
                    if not self._commands:
                        break
                    msg = self._commands.popleft()
                self._apply(msg)
            if not self.paused:
                stats = sess.advance()
                frame = protocol.frame_message(
                    step=sess.step_index,
                    t=sess.step_index * sess.h,
                    z=sess.state.z,
                    positions=sess.vertex_positions(),
                    objective=stats.objective_value,
                    ms=stats.solve_ms)
                self._broadcast(frame)
            remaining = self.period - (time.perf_counter() - tick)
            if remaining > 0:
                time.sleep(remaining)


def create_app(sim: StreamingSim | None = None) -> FastAPI:
    app = FastAPI(title="physkin", version=physkin.__version__)
    app.state.sim = sim

    def run_cmd(fn, *args, **kw):
        try:
            return fn(*args, **kw)
        except (ValueError, FileNotFoundError) as e:
            raise HTTPException(status_code=400, detail=str(e))
        except Exception:
            raise HTTPException(status_code=500,
                                detail=traceback.format_exc(limit=4))

    @app.get("/api/health")
    def health():
        return {"status": "ok", "version": physkin.__version__}

    @app.post("/api/sample")
    def sample(req: SampleRequest):
        return run_cmd(pipeline.run_sample, req.config)

    @app.post("/api/train")
    def train(req: TrainRequest):
        return run_cmd(pipeline.run_train, req.config, resume=req.resume)

    @app.post("/api/eval")
    def evaluate(req: EvalRequest):
        return run_cmd(pipeline.run_eval, req.config, req.checkpoint,
                       handle=req.handle)

    @app.post("/api/animate")
    def animate(req: AnimateRequest):
        return run_cmd(pipeline.run_animate, req.config, req.checkpoint,
                       req.script, steps=req.steps,
                       frames_format=req.frames_format)

    @app.websocket("/ws")
    async def ws(socket: WebSocket):
        sim = app.state.sim
        await socket.accept()
        if sim is None:
            await socket.send_text(protocol.error_message(
                "no simulation session on this server (start with `physkin serve`)"))
            await socket.close()
            return
        await socket.send_text(protocol.mesh_message(
            sim.session.mesh.vertices, sim.session.mesh.faces))
        queue: asyncio.Queue = asyncio.Queue(maxsize=3)
        cid = sim.attach(asyncio.get_running_loop(), queue)

        async def writer():
            while True:
                await socket.send_text(await queue.get())

        task = asyncio.create_task(writer())
        try:
            while True:
                text = await socket.receive_text()
                try:
                    msg = protocol.decode_message(text)
                    if msg["type"] not in ("pin", "drag", "release",
                                           "reset", "pause", "resume"):
                        raise protocol.ProtocolError(
                            f"{msg['type']!r} is a server-side message type")
                    sim.submit(msg)
                except protocol.ProtocolError as e:
                    await socket.send_text(protocol.error_message(str(e)))
        except WebSocketDisconnect:
            pass
        finally:
            task.cancel()
            sim.detach(cid)

    return app


def serve_forever(cfg: RunConfig, checkpoint: str):
    """Blocking entry point behind `physkin serve`."""
    import uvicorn

    session = pipeline.SimSession(cfg, checkpoint)
    sim = StreamingSim(session, cfg.serve.frame_rate)
    sim.start()
    app = create_app(sim)
    try:
        uvicorn.run(app, host=cfg.serve.host, port=cfg.serve.port,
                    log_level="warning")
    finally:
        sim.stop()
