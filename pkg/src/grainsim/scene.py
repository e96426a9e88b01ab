"""Scene files: parsing, validation, and deterministic construction.

Scenes are TOML with a version marker and strict unknown-key rejection.
Minimal example:

    version = 1
    seed = 42
    duration = 3.0
    r_lr = 0.03

    [material]
    density = 1600.0
    mu_s = 0.35
    mu_k = 0.3

    [hr]
    r_hr = 0.01

    [[entity]]
    name = "sand"
    mesh = "sand.obj"
    role = "granular"

    [[entity]]
    name = "floor"
    mesh = "floor.obj"
    role = "boundary"

Entity roles: granular (volume-sampled into both stages), rigid_dynamic,
rigid_kinematic (volume-sampled, grouped into a body), boundary
(surface-sampled, immovable). Kinematic entities take [[entity.keyframes]]
tables with t / translate / rotate (axis-angle) fields.
"""

from __future__ import annotations

import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import (
    BOUNDARY,
    GRANULAR,
    NO_BODY,
    RIGID,
    HrParams,
    LrParams,
    MaterialParams,
    ParameterError,
    ParticleSet,
    SceneError,
    mass_from_density,
)
from .meshes import TriangleMesh, load_mesh
from .rigid import DYNAMIC, KINEMATIC, KeyframeTrack, RigidBody, axis_angle_to_matrix
from .sampling import sample_surface, sample_volume
from .upsampler import HrSet

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

ROLE_GRANULAR = "granular"
ROLE_RIGID_DYNAMIC = "rigid_dynamic"
ROLE_RIGID_KINEMATIC = "rigid_kinematic"
ROLE_BOUNDARY = "boundary"
_ROLES = (ROLE_GRANULAR, ROLE_RIGID_DYNAMIC, ROLE_RIGID_KINEMATIC, ROLE_BOUNDARY)


@dataclass
class Entity:
    name: str
    mesh: str
    role: str
    translate: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotate: np.ndarray = field(default_factory=lambda: np.zeros(3))  # axis-angle
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    density: float | None = None      # rigid-body override of material density
    mu_s: float | None = None
    mu_k: float | None = None
    keyframes: list[dict] = field(default_factory=list)


@dataclass
class Scene:
    r_lr: float
    hr: HrParams
    material: MaterialParams = field(default_factory=MaterialParams)
    lr: LrParams = field(default_factory=LrParams)
    entities: list[Entity] = field(default_factory=list)
    duration: float = 1.0
    seed: int = 0
    base_dir: Path = field(default_factory=Path)

    def validate(self) -> None:
        try:
            self.material.validate()
            self.lr.validate()
            self.hr.validate(self.r_lr)
        except ParameterError as exc:
            raise SceneError(str(exc)) from exc
        if self.r_lr <= 0.0:
            raise SceneError(f"r_lr must be positive, got {self.r_lr}")
        if self.duration < 0.0:
            raise SceneError(f"duration must be >= 0, got {self.duration}")
        ratio = self.hr.r_hr / self.r_lr
        if not 0.1 <= ratio <= 0.5:
            raise SceneError(
                f"r_hr/r_lr = {ratio:.3f} outside the supported [0.1, 0.5] range"
            )
        if not 0.2 <= ratio <= 0.4:
            log.warning("r_hr/r_lr = %.3f is outside the recommended [0.2, 0.4] band", ratio)
        for ent in self.entities:
            if ent.role not in _ROLES:
                raise SceneError(f"entity {ent.name!r}: unknown role {ent.role!r} "
                                 f"(expected one of {', '.join(_ROLES)})")
            if ent.mu_s is not None or ent.mu_k is not None:
                mu_s = ent.mu_s if ent.mu_s is not None else self.material.mu_s
                mu_k = ent.mu_k if ent.mu_k is not None else self.material.mu_k
                if not mu_s >= mu_k >= 0.0:
                    raise SceneError(f"entity {ent.name!r}: mu_s must be >= mu_k >= 0 "
                                     f"(mu_s={mu_s}, mu_k={mu_k})")
            path = self.base_dir / ent.mesh
            if not path.exists():
                raise SceneError(f"entity {ent.name!r}: mesh file not found: {path}")


# ---------------------------------------------------------------------------
# Parsing

def _reject_unknown(table: dict, allowed: set[str], where: str) -> None:
    for key in table:
        if key not in allowed:
            raise SceneError(f"unknown key {key!r} in {where}")


def _vec3(table: dict, key: str, where: str, default):
    value = table.get(key, default)
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (3,):
        raise SceneError(f"{where}.{key} must be a list of 3 numbers")
    return arr


_TOP_KEYS = {"version", "seed", "duration", "r_lr", "material", "lr", "hr", "entity"}
_MATERIAL_KEYS = {"density", "mu_s", "mu_k"}
_LR_KEYS = {"dt", "solver_iterations", "stabilization_iterations", "gravity",
            "mass_scale_k", "cfl_factor", "ground_height", "inelastic_contacts"}
_HR_KEYS = {"dt", "r_hr", "c1", "c2", "gravity", "floor_clamp"}
_ENTITY_KEYS = {"name", "mesh", "role", "translate", "rotate", "velocity",
                "density", "mu_s", "mu_k", "keyframes"}
_KEYFRAME_KEYS = {"t", "translate", "rotate"}


def load_scene(path) -> Scene:
    """Parse and validate a scene file; any problem raises SceneError."""
    path = Path(path)
    if not path.exists():
        raise SceneError(f"scene file not found: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise SceneError(f"{path}: {exc}") from exc
    return parse_scene(raw, base_dir=path.parent)


def parse_scene(raw: dict, base_dir=Path(".")) -> Scene:
    _reject_unknown(raw, _TOP_KEYS, "scene")
    version = raw.get("version")
    if version != SCHEMA_VERSION:
        raise SceneError(f"scene version must be {SCHEMA_VERSION}, got {version!r}")
    if "r_lr" not in raw:
        raise SceneError("scene is missing required key 'r_lr'")

    mat_tbl = raw.get("material", {})
    _reject_unknown(mat_tbl, _MATERIAL_KEYS, "[material]")
    material = MaterialParams(
        density=float(mat_tbl.get("density", 1600.0)),
        mu_s=float(mat_tbl.get("mu_s", 0.35)),
        mu_k=float(mat_tbl.get("mu_k", 0.3)),
    )

    lr_tbl = raw.get("lr", {})
    _reject_unknown(lr_tbl, _LR_KEYS, "[lr]")
    lr = LrParams(
        dt=float(lr_tbl.get("dt", 0.005)),
        solver_iterations=int(lr_tbl.get("solver_iterations", 5)),
        stabilization_iterations=int(lr_tbl.get("stabilization_iterations", 2)),
        gravity=_vec3(lr_tbl, "gravity", "lr", [0.0, -9.81, 0.0]),
        mass_scale_k=(float(lr_tbl["mass_scale_k"]) if "mass_scale_k" in lr_tbl else None),
        cfl_factor=float(lr_tbl.get("cfl_factor", 0.4)),
        ground_height=float(lr_tbl.get("ground_height", 0.0)),
        inelastic_contacts=bool(lr_tbl.get("inelastic_contacts", True)),
    )

    hr_tbl = raw.get("hr", {})
    _reject_unknown(hr_tbl, _HR_KEYS, "[hr]")
    if "r_hr" not in hr_tbl:
        raise SceneError("scene is missing required key 'r_hr' in [hr]")
    hr = HrParams(
        r_hr=float(hr_tbl["r_hr"]),
        dt=float(hr_tbl.get("dt", 0.0167)),
        gravity=_vec3(hr_tbl, "gravity", "hr", [0.0, -9.81, 0.0]),
        floor_clamp=bool(hr_tbl.get("floor_clamp", True)),
        **{k: float(hr_tbl[k]) for k in ("c1", "c2") if k in hr_tbl},
    )

    entities = []
    for n, ent_tbl in enumerate(raw.get("entity", [])):
        where = f"[[entity]] #{n}"
        _reject_unknown(ent_tbl, _ENTITY_KEYS, where)
        for required in ("name", "mesh", "role"):
            if required not in ent_tbl:
                raise SceneError(f"{where} is missing required key {required!r}")
        keyframes = []
        for k, kf in enumerate(ent_tbl.get("keyframes", [])):
            _reject_unknown(kf, _KEYFRAME_KEYS, f"{where}.keyframes #{k}")
            keyframes.append({
                "t": float(kf.get("t", 0.0)),
                "translate": _vec3(kf, "translate", where, [0.0, 0.0, 0.0]),
                "rotate": _vec3(kf, "rotate", where, [0.0, 0.0, 0.0]),
            })
        entities.append(Entity(
            name=str(ent_tbl["name"]),
            mesh=str(ent_tbl["mesh"]),
            role=str(ent_tbl["role"]),
            translate=_vec3(ent_tbl, "translate", where, [0.0, 0.0, 0.0]),
            rotate=_vec3(ent_tbl, "rotate", where, [0.0, 0.0, 0.0]),
            velocity=_vec3(ent_tbl, "velocity", where, [0.0, 0.0, 0.0]),
            density=(float(ent_tbl["density"]) if "density" in ent_tbl else None),
            mu_s=(float(ent_tbl["mu_s"]) if "mu_s" in ent_tbl else None),
            mu_k=(float(ent_tbl["mu_k"]) if "mu_k" in ent_tbl else None),
            keyframes=keyframes,
        ))

    scene = Scene(
        r_lr=float(raw["r_lr"]),
        hr=hr,
        material=material,
        lr=lr,
        entities=entities,
        duration=float(raw.get("duration", 1.0)),
        seed=int(raw.get("seed", 0)),
        base_dir=Path(base_dir),
    )
    scene.validate()
    return scene


# ---------------------------------------------------------------------------
# Construction

def _entity_seed(scene_seed: int, index: int, stream: int = 0) -> int:
    # Stable per-entity stream; the two stages of one entity and the streams
    # of different entities never share a seed.
    return (scene_seed * 1_000_003 + 2 * index + stream) & 0x7FFFFFFF


@dataclass
class BuiltScene:
    particles: ParticleSet
    bodies: list[RigidBody]
    hr: HrSet
    scene: Scene


def build_scene(scene: Scene) -> BuiltScene:
    """Sample every entity into particles; deterministic per scene seed."""
    scene.validate()
    parts: list[ParticleSet] = []
    hr_parts: list[np.ndarray] = []
    body_specs: list[tuple[str, np.ndarray, object]] = []  # (kind, rest pos, track)
    offset = 0
    next_body = 0

    for index, ent in enumerate(scene.entities):
        mesh = load_mesh(scene.base_dir / ent.mesh)
        mesh = mesh.transformed(rotation=axis_angle_to_matrix(ent.rotate),
                                translation=ent.translate)
        seed = _entity_seed(scene.seed, index)
        mu_s = ent.mu_s if ent.mu_s is not None else scene.material.mu_s
        mu_k = ent.mu_k if ent.mu_k is not None else scene.material.mu_k
        try:
            part = _build_entity(scene, ent, mesh, seed, mu_s, mu_k, next_body)
        except (SceneError, ParameterError) as exc:
            raise SceneError(f"entity {ent.name!r}: {exc}") from exc
        except Exception as exc:
            raise type(exc)(f"entity {ent.name!r}: {exc}") from exc
        if ent.role == ROLE_GRANULAR:
            hr_pos = sample_volume(mesh, scene.hr.r_hr, _entity_seed(scene.seed, index, 1))
            if len(hr_pos):
                hr_parts.append(hr_pos)
        elif ent.role in (ROLE_RIGID_DYNAMIC, ROLE_RIGID_KINEMATIC):
            kind = DYNAMIC if ent.role == ROLE_RIGID_DYNAMIC else KINEMATIC
            track = None
            if ent.keyframes:
                # Keyframe transforms are authored relative to the initial
                # pose: rotation about the sampled centroid, translation as an
                # offset from it.
                centroid = part.x.mean(axis=0)
                track = KeyframeTrack(
                    [kf["t"] for kf in ent.keyframes],
                    [centroid + kf["translate"] for kf in ent.keyframes],
                    [kf["rotate"] for kf in ent.keyframes],
                )
            body_specs.append((kind, part.x.copy(), track))
            next_body += 1
        parts.append(part)
        offset += part.n

    particles = ParticleSet.concatenate(parts, scene.r_lr)
    bodies = []
    body_index = 0
    cursor = 0
    for part in parts:
        ids = particles.body_id[cursor:cursor + part.n]
        if part.n and ids[0] != NO_BODY:
            kind, rest, track = body_specs[body_index]
            body = RigidBody.from_particles(
                np.arange(cursor, cursor + part.n), rest, kind=kind,
                body_id=int(ids[0]), track=track,
            )
            bodies.append(body)
            body_index += 1
        cursor += part.n

    hr_positions = np.concatenate(hr_parts) if hr_parts else np.zeros((0, 3))
    hr = HrSet.create(hr_positions, scene.hr.r_hr)
    # Upsampled particles of moving granular entities start with the entity
    # velocity only through the gather; their own state starts at rest.
    return BuiltScene(particles=particles, bodies=bodies, hr=hr, scene=scene)


def _build_entity(scene: Scene, ent: Entity, mesh: TriangleMesh, seed: int,
                  mu_s: float, mu_k: float, next_body: int) -> ParticleSet:
    if ent.role == ROLE_BOUNDARY:
        pos = sample_surface(mesh, scene.r_lr, seed)
        return ParticleSet.create(
            pos, scene.r_lr, inv_mass=0.0, mu_s=mu_s, mu_k=mu_k,
            phase=BOUNDARY, velocities=np.broadcast_to(ent.velocity, (len(pos), 3)),
        )
    pos = sample_volume(mesh, scene.r_lr, seed)
    if len(pos) == 0:
        return ParticleSet.empty(scene.r_lr)
    if ent.role == ROLE_GRANULAR:
        mass = mass_from_density(scene.material.density, scene.r_lr)
        return ParticleSet.create(
            pos, scene.r_lr, inv_mass=1.0 / mass, mu_s=mu_s, mu_k=mu_k,
            phase=GRANULAR, velocities=np.broadcast_to(ent.velocity, (len(pos), 3)),
        )
    density = ent.density if ent.density is not None else scene.material.density
    mass = mass_from_density(density, scene.r_lr)
    inv_mass = 0.0 if ent.role == ROLE_RIGID_KINEMATIC else 1.0 / mass
    return ParticleSet.create(
        pos, scene.r_lr, inv_mass=inv_mass, mu_s=mu_s, mu_k=mu_k,
        phase=RIGID, body_id=next_body,
        velocities=np.broadcast_to(ent.velocity, (len(pos), 3)),
    )
