"""Headless simulation driver: advance both stages, record frames, report timing.

The solver advances in dt_lr steps until it reaches (or passes) each frame
time n * dt_hr, then one upsampling step runs against the freshest solver
state. Frame writing overlaps the next simulation step through a
single-producer/single-consumer handoff with at most one frame in flight.
"""

from __future__ import annotations

import csv
import math
import queue
import statistics
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import SimulationError
from .frames import FrameRecord, write_frame, write_ply
from .neighbors import NeighborGrid
from .scene import BuiltScene, Scene, build_scene
from .solver import step
from .upsampler import hr_step


@dataclass
class RunSummary:
    frames: int
    lr_particles: int
    hr_particles: int
    lr_ms: list[float] = field(default_factory=list)
    hr_ms: list[float] = field(default_factory=list)

    @staticmethod
    def _stats(samples: list[float]) -> dict[str, float]:
        if not samples:
            return {"mean": 0.0, "median": 0.0, "p95": 0.0}
        ordered = sorted(samples)
        p95 = ordered[min(len(ordered) - 1, math.ceil(0.95 * len(ordered)) - 1)]
        return {
            "mean": statistics.fmean(samples),
            "median": statistics.median(samples),
            "p95": p95,
        }

    @property
    def lr_stats(self) -> dict[str, float]:
        return self._stats(self.lr_ms)

    @property
    def hr_stats(self) -> dict[str, float]:
        return self._stats(self.hr_ms)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "lr_ms", "hr_ms"])
            for n, (a, b) in enumerate(zip(self.lr_ms, self.hr_ms), start=1):
                writer.writerow([n, f"{a:.4f}", f"{b:.4f}"])

    def describe(self) -> str:
        lr, hr = self.lr_stats, self.hr_stats
        return (
            f"{self.frames} frames, {self.lr_particles} solver + "
            f"{self.hr_particles} upsampled particles\n"
            f"  solver   per frame: mean {lr['mean']:.2f} ms, "
            f"median {lr['median']:.2f} ms, p95 {lr['p95']:.2f} ms\n"
            f"  upsample per frame: mean {hr['mean']:.2f} ms, "
            f"median {hr['median']:.2f} ms, p95 {hr['p95']:.2f} ms"
        )


class _FrameWriter:
    """Writer thread taking completed frames off a one-slot queue."""

    def __init__(self, sink, ply_dir=None):
        self.sink = sink
        self.ply_dir = Path(ply_dir) if ply_dir else None
        self.queue: queue.Queue = queue.Queue(maxsize=1)
        self.error: BaseException | None = None
        self.thread = threading.Thread(target=self._loop, daemon=True)
        self.thread.start()

    def _loop(self):
        while True:
            record = self.queue.get()
            if record is None:
                return
            try:
                if self.sink is not None:
                    write_frame(record, self.sink)
                if self.ply_dir is not None:
                    write_ply(self.ply_dir / f"frame_{record.index:06d}_lr.ply",
                              record.lr_positions)
                    write_ply(self.ply_dir / f"frame_{record.index:06d}_hr.ply",
                              record.hr_positions)
            except BaseException as exc:  # surfaced on the producer side
                self.error = exc
                return

    def put(self, record: FrameRecord):
        if self.error is not None:
            raise self.error
        self.queue.put(record)

    def close(self):
        self.queue.put(None)
        self.thread.join()
        if self.error is not None:
            raise self.error


def run(scene: Scene | BuiltScene, sink=None, *, frames: int | None = None,
        deterministic: bool = False, ply_dir=None, on_frame=None) -> RunSummary:
    """Run a scene to its duration, emitting one frame per upsampling step.

    `sink` is an open binary file (or None to skip recording). In
    deterministic mode the recorded timing fields are zeroed so repeated runs
    produce byte-identical files. `on_frame(record)` is called per frame.
    """
    built = scene if isinstance(scene, BuiltScene) else build_scene(scene)
    cfg = built.scene
    ps, bodies, hr = built.particles, built.bodies, built.hr

    n_frames = int(math.floor(cfg.duration / cfg.hr.dt + 1e-9))
    if frames is not None:
        n_frames = frames
    summary = RunSummary(frames=0, lr_particles=ps.n, hr_particles=hr.n)
    if ply_dir is not None:
        Path(ply_dir).mkdir(parents=True, exist_ok=True)
    writer = _FrameWriter(sink, ply_dir) if (sink or ply_dir) else None

    t_lr = 0.0
    try:
        for k in range(1, n_frames + 1):
            t_frame = k * cfg.hr.dt
            t0 = time.perf_counter()
            try:
                while t_lr < t_frame - 1e-12:
                    step(ps, bodies, cfg.lr, t0=t_lr)
                    t_lr += cfg.lr.dt
            except SimulationError as exc:
                raise SimulationError(f"{exc} (last good frame {k - 1})") from exc
            t1 = time.perf_counter()
            if hr.n:
                grid = NeighborGrid.build(ps.x, 3.0 * cfg.r_lr)
                hr_step(hr, ps, grid, cfg.hr, ground_height=cfg.lr.ground_height)
            t2 = time.perf_counter()

            lr_ms = 0.0 if deterministic else (t1 - t0) * 1e3
            hr_ms = 0.0 if deterministic else (t2 - t1) * 1e3
            record = FrameRecord.capture(k, t_frame, ps.x, hr.x, lr_ms, hr_ms)
            summary.frames = k
            summary.lr_ms.append((t1 - t0) * 1e3)
            summary.hr_ms.append((t2 - t1) * 1e3)
            if writer is not None:
                writer.put(record)
            if on_frame is not None:
                on_frame(record)
    finally:
        if writer is not None:
            writer.close()
    return summary


def bench(scene: Scene, repeat: int = 3, frames: int | None = None) -> list[RunSummary]:
    """Repeat a run without recording and collect per-run timing summaries."""
    summaries = []
    for _ in range(repeat):
        fresh = build_scene(scene)  # identical start state each repetition
        summaries.append(run(fresh, frames=frames))
    return summaries


def write_bench_csv(path, summaries: list[RunSummary]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "run", "frames", "lr_particles", "hr_particles",
            "lr_mean_ms", "lr_median_ms", "lr_p95_ms",
            "hr_mean_ms", "hr_median_ms", "hr_p95_ms",
        ])
        for n, s in enumerate(summaries, start=1):
            lr, hr = s.lr_stats, s.hr_stats
            writer.writerow([
                n, s.frames, s.lr_particles, s.hr_particles,
                f"{lr['mean']:.4f}", f"{lr['median']:.4f}", f"{lr['p95']:.4f}",
                f"{hr['mean']:.4f}", f"{hr['median']:.4f}", f"{hr['p95']:.4f}",
            ])
