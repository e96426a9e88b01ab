"""Live interactive session: simulation loop, WebSocket broadcast, user input.

One simulation loop runs in a worker thread, paced to wall-clock frame time;
when a frame overruns its budget it is emitted late rather than skipping
simulated time. Completed frames are fanned out to connected viewers over
binary WebSocket messages; every client has a two-slot outgoing queue that
drops the oldest frame first, so a slow client never stalls the loop.

Input commands are queued thread-safely and drained at frame boundaries
only, before the solver steps of that frame begin. The HTTP side of the same
port serves GET /manifest (JSON) and, when configured, the static viewer app.
"""

from __future__ import annotations

import asyncio
import http
import json
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import protocol
from .frames import FrameRecord
from .neighbors import NeighborGrid
from .rigid import KINEMATIC, ConstantTarget, axis_angle_to_matrix
from .scene import Scene, build_scene
from .solver import step
from .upsampler import hr_step

log = logging.getLogger(__name__)

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".mjs": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".map": "application/json",
    ".json": "application/json",
    ".png": "image/png",
    ".svg": "image/svg+xml",
}


@dataclass
class SessionState:
    scene: Scene
    decimate: int = 1
    running: bool = True
    clients: int = 0
    frame_index: int = 0
    sim_time: float = 0.0


class LiveSession:
    """Owns the simulation thread and the broadcast fan-out."""

    def __init__(self, scene: Scene, decimate: int = 1):
        self.state = SessionState(scene=scene, decimate=max(1, int(decimate)))
        self.built = build_scene(scene)
        self.commands: deque[protocol.InputCommand] = deque()
        self._cmd_lock = threading.Lock()
        self._stop = threading.Event()
        self._queues: set[asyncio.Queue] = set()
        self._loop: asyncio.AbstractEventLoop | None = None
        self.manifest = self._make_manifest()

    # -- manifest ----------------------------------------------------------
    def _make_manifest(self) -> protocol.Manifest:
        bodies = [
            (body.body_id, 1 if body.kind == KINEMATIC else 0)
            for body in self.built.bodies
        ]
        return protocol.Manifest(
            lr_count=self.built.particles.n,
            hr_count=len(protocol.decimated_positions(self.built.hr.x, self.state.decimate)),
            r_lr=self.built.scene.r_lr,
            r_hr=self.built.scene.hr.r_hr,
            decimate=self.state.decimate,
            bodies=bodies,
        )

    def manifest_json(self) -> str:
        m = self.manifest
        return json.dumps({
            "lr_count": m.lr_count,
            "hr_count": m.hr_count,
            "r_lr": m.r_lr,
            "r_hr": m.r_hr,
            "decimate": m.decimate,
            "bodies": [{"id": b, "kinematic": bool(k)} for b, k in m.bodies],
        })

    # -- command handling ----------------------------------------------------
    def submit(self, cmd: protocol.InputCommand) -> None:
        with self._cmd_lock:
            self.commands.append(cmd)

    def _drain_commands(self) -> None:
        with self._cmd_lock:
            pending = list(self.commands)
            self.commands.clear()
        for cmd in pending:
            self._apply_command(cmd)

    def _apply_command(self, cmd: protocol.InputCommand) -> None:
        boundary = f"frame {self.state.frame_index + 1}"
        if cmd.command == protocol.CMD_PAUSE:
            self.state.running = False
            log.info("pause applied at %s boundary", boundary)
            return
        if cmd.command == protocol.CMD_RESUME:
            self.state.running = True
            log.info("resume applied at %s boundary", boundary)
            return
        if cmd.command == protocol.CMD_RESET:
            self.built = build_scene(self.state.scene)
            self.state.frame_index = 0
            self.state.sim_time = 0.0
            log.info("reset applied at %s boundary", boundary)
            return
        body = next((b for b in self.built.bodies if b.body_id == cmd.body_id), None)
        if body is None or body.kind != KINEMATIC:
            log.warning("ignoring command for unknown/non-kinematic body %d", cmd.body_id)
            return
        target = self._mutable_target(body)
        if cmd.command == protocol.CMD_SET_TARGET:
            target.set_to(body.rest_centroid + cmd.translation, cmd.rotation)
            log.info("set-target on body %d applied at %s boundary", cmd.body_id, boundary)
        elif cmd.command == protocol.CMD_NUDGE:
            delta = protocol.clamp_nudge(cmd.translation, self.built.scene.r_lr)
            target.nudge(delta, cmd.rotation)
            log.info("nudge on body %d applied at %s boundary", cmd.body_id, boundary)

    def _mutable_target(self, body) -> ConstantTarget:
        if isinstance(body.track, ConstantTarget):
            return body.track
        if body.track is not None:
            rotation, translation = body.track.at(self.state.sim_time)
            target = ConstantTarget(rotation, translation)
        else:
            target = ConstantTarget(translation=body.rest_centroid)
        body.track = target
        return target

    # -- simulation loop -----------------------------------------------------
    def _sim_loop(self) -> None:
        cfg = self.built.scene
        next_emit = time.perf_counter()
        while not self._stop.is_set():
            self._drain_commands()
            if not self.state.running:
                next_emit = time.perf_counter()
                time.sleep(0.02)
                continue
            built = self.built
            k = self.state.frame_index + 1
            t_frame = k * cfg.hr.dt
            t0 = time.perf_counter()
            while self.state.sim_time < t_frame - 1e-12:
                step(built.particles, built.bodies, cfg.lr, t0=self.state.sim_time)
                self.state.sim_time += cfg.lr.dt
            t1 = time.perf_counter()
            if built.hr.n:
                grid = NeighborGrid.build(built.particles.x, 3.0 * cfg.r_lr)
                hr_step(built.hr, built.particles, grid, cfg.hr,
                        ground_height=cfg.lr.ground_height)
            t2 = time.perf_counter()
            self.state.frame_index = k
            record = FrameRecord.capture(
                k, t_frame, built.particles.x, built.hr.x,
                (t1 - t0) * 1e3, (t2 - t1) * 1e3,
            )
            data = protocol.encode_frame_message(record, self.state.decimate)
            self._broadcast(data)
            # Pace to wall-clock frame time; overruns emit late, never skip.
            next_emit += cfg.hr.dt
            delay = next_emit - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            else:
                next_emit = time.perf_counter()

    def _broadcast(self, data: bytes) -> None:
        loop = self._loop
        if loop is None or loop.is_closed():
            return
        loop.call_soon_threadsafe(self._fan_out, data)

    def _fan_out(self, data: bytes) -> None:
        for q in list(self._queues):
            try:
                q.put_nowait(data)
            except asyncio.QueueFull:
                try:
                    q.get_nowait()  # drop the oldest frame, newest wins
                except asyncio.QueueEmpty:
                    pass
                q.put_nowait(data)

    # -- websocket plumbing ----------------------------------------------------
    async def handle_client(self, websocket) -> None:
        queue: asyncio.Queue = asyncio.Queue(maxsize=2)
        self._queues.add(queue)
        self.state.clients += 1
        log.info("client connected (%d total)", self.state.clients)
        try:
            await websocket.send(protocol.encode_manifest(self.manifest))

            async def sender():
                while True:
                    await websocket.send(await queue.get())

            async def receiver():
                async for message in websocket:
                    if isinstance(message, (bytes, bytearray)):
                        try:
                            self.submit(protocol.decode_input(bytes(message)))
                        except Exception as exc:
                            log.warning("dropping malformed command: %s", exc)

            send_task = asyncio.create_task(sender())
            recv_task = asyncio.create_task(receiver())
            done, pending = await asyncio.wait(
                {send_task, recv_task}, return_when=asyncio.FIRST_COMPLETED
            )
            for task in pending:
                task.cancel()
        finally:
            self._queues.discard(queue)
            self.state.clients -= 1
            log.info("client disconnected (%d total)", self.state.clients)

    async def process_request(self, connection, request):
        """Answer plain HTTP for /manifest and static viewer files."""
        path = request.path.split("?", 1)[0]
        if path == "/session":
            return None  # continue the WebSocket handshake
        if path == "/manifest":
            return connection.respond(http.HTTPStatus.OK, self.manifest_json())
        frontend = getattr(self, "frontend_dir", None)
        if frontend is not None:
            rel = "index.html" if path == "/" else path.lstrip("/")
            candidate = (Path(frontend) / rel).resolve()
            if candidate.is_file() and str(candidate).startswith(str(Path(frontend).resolve())):
                response = connection.respond(http.HTTPStatus.OK, "")
                response.body = candidate.read_bytes()
                ctype = _CONTENT_TYPES.get(candidate.suffix, "application/octet-stream")
                response.headers["Content-Type"] = ctype
                response.headers["Content-Length"] = str(len(response.body))
                return response
        return connection.respond(http.HTTPStatus.NOT_FOUND, "not found\n")

    # -- lifecycle ----------------------------------------------------------
    async def serve_forever(self, host: str, port: int, frontend_dir=None,
                            ready: threading.Event | None = None) -> None:
        import websockets.asyncio.server as ws_server

        self.frontend_dir = frontend_dir
        self._loop = asyncio.get_running_loop()
        sim_thread = threading.Thread(target=self._sim_loop, daemon=True)
        async with ws_server.serve(
            self.handle_client, host, port, process_request=self.process_request,
            max_size=None,
        ) as server:
            sim_thread.start()
            self.server = server
            log.info("serving on %s:%d (%d solver / %d upsampled particles)",
                     host, port, self.manifest.lr_count, self.manifest.hr_count)
            if ready is not None:
                ready.set()
            try:
                await asyncio.get_running_loop().run_in_executor(None, self._stop.wait)
            finally:
                self._stop.set()

    def stop(self) -> None:
        self._stop.set()


def serve(scene: Scene, bind: str = "127.0.0.1:8765", decimate: int = 1,
          frontend_dir=None) -> None:
    """Blocking entry point: run a live session until interrupted."""
    host, _, port = bind.rpartition(":")
    session = LiveSession(scene, decimate=decimate)
    try:
        asyncio.run(session.serve_forever(host or "127.0.0.1", int(port),
                                          frontend_dir=frontend_dir))
    except KeyboardInterrupt:
        session.stop()
