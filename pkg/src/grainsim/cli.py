"""Command-line interface: headless runs, benchmarking, sampling, live serving.

Exit codes: 0 success, 2 configuration error, 3 simulation error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .core import (
    FrameFormatError,
    GeometryError,
    ParameterError,
    SceneError,
    SimulationError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIMULATION = 3
EXIT_IO = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grainsim",
        description="Two-stage granular material simulator",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run a scene headless and record frames")
    p_sim.add_argument("scene", help="scene file (TOML)")
    p_sim.add_argument("--out", required=True, help="output frame stream file")
    p_sim.add_argument("--frames", type=int, default=None,
                       help="frame count override (default: duration / dt_hr)")
    p_sim.add_argument("--deterministic", action="store_true",
                       help="zero recorded timings so equal seeds give equal bytes")
    p_sim.add_argument("--seed", type=int, default=None, help="scene seed override")
    p_sim.add_argument("--ply-dir", default=None,
                       help="also write one PLY point cloud per frame into this directory")

    p_bench = sub.add_parser("bench", help="run a scene repeatedly and report timings")
    p_bench.add_argument("scene", help="scene file (TOML)")
    p_bench.add_argument("--repeat", type=int, default=3)
    p_bench.add_argument("--frames", type=int, default=None)
    p_bench.add_argument("--csv", default=None, help="write the timing table here")

    p_sample = sub.add_parser("sample", help="sample a mesh into particle positions")
    p_sample.add_argument("mesh", help="mesh file (OBJ or binary STL)")
    p_sample.add_argument("--radius", type=float, required=True)
    p_sample.add_argument("--mode", choices=["volume", "surface"], default="volume")
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--out", required=True, help="output PLY file")

    p_serve = sub.add_parser("serve", help="serve a live interactive session")
    p_serve.add_argument("scene", help="scene file (TOML)")
    p_serve.add_argument("--bind", default="127.0.0.1:8765")
    p_serve.add_argument("--decimate", type=int, default=1,
                         help="stream every k-th upsampled particle")
    p_serve.add_argument("--frontend", default=None,
                         help="directory with the built viewer app to serve at /")
    return parser


def _cmd_simulate(args) -> int:
    from .runner import run
    from .scene import load_scene

    scene = load_scene(args.scene)
    if args.seed is not None:
        scene.seed = args.seed
    with open(args.out, "wb") as sink:
        summary = run(scene, sink, frames=args.frames,
                      deterministic=args.deterministic, ply_dir=args.ply_dir)
    print(summary.describe())
    print(f"wrote {summary.frames} frames to {args.out}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    from .runner import bench, write_bench_csv
    from .scene import load_scene

    scene = load_scene(args.scene)
    summaries = bench(scene, repeat=args.repeat, frames=args.frames)
    for n, summary in enumerate(summaries, start=1):
        print(f"run {n}:")
        print(summary.describe())
    if args.csv:
        write_bench_csv(args.csv, summaries)
        print(f"timing table written to {args.csv}")
    return EXIT_OK


def _cmd_sample(args) -> int:
    from .frames import write_ply
    from .meshes import load_mesh
    from .sampling import sample_surface, sample_volume

    mesh = load_mesh(args.mesh)
    if args.mode == "volume":
        points = sample_volume(mesh, args.radius, args.seed)
    else:
        points = sample_surface(mesh, args.radius, args.seed)
    write_ply(args.out, points)
    print(f"{len(points)} samples written to {args.out}")
    return EXIT_OK


def _cmd_serve(args) -> int:
    from .scene import load_scene
    from .server import serve

    scene = load_scene(args.scene)
    frontend = args.frontend
    if frontend is None:
        default_dist = Path("frontend") / "dist"
        if default_dist.is_dir():
            frontend = default_dist
    serve(scene, bind=args.bind, decimate=args.decimate, frontend_dir=frontend)
    return EXIT_OK


_HANDLERS = {
    "simulate": _cmd_simulate,
    "bench": _cmd_bench,
    "sample": _cmd_sample,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return _HANDLERS[args.command](args)
    except (SceneError, ParameterError, GeometryError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except (OSError, FrameFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
