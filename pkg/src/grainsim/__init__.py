"""Two-stage granular material simulation.

A small set of guide particles is simulated accurately with a position-based
contact/friction solver (with rigid-body coupling), and a much larger set of
visualization particles is advected through the resulting velocity field.
"""

from .core import (
    BOUNDARY,
    GRANULAR,
    NO_BODY,
    RIGID,
    DataError,
    FrameFormatError,
    GeometryError,
    GrainSimError,
    HrParams,
    LrParams,
    MaterialParams,
    ParameterError,
    ParticleSet,
    SceneError,
    SimulationError,
    cross_friction,
    mass_from_density,
)
from .meshes import TriangleMesh, box_mesh, icosphere, load_mesh, quad_mesh, save_obj
from .neighbors import NeighborGrid
from .rigid import (
    DYNAMIC,
    KINEMATIC,
    ConstantTarget,
    KeyframeTrack,
    RigidBody,
    covariance,
    drive_kinematic,
    polar_rotation,
    shape_match,
)
from .sampling import point_in_mesh, points_in_mesh, sample_surface, sample_volume
from .solver import (
    ConstraintBatch,
    apply_averaged,
    cfl_substeps,
    generate_contacts,
    predict,
    scaled_mass,
    solve_contact,
    solve_friction,
    step,
    update_scaled_masses,
)
from .upsampler import (
    HrField,
    HrSet,
    advect,
    alpha,
    compute_alpha,
    floor_clamp,
    gather_field,
    gather_one,
    hr_step,
    weight,
)

__version__ = "0.1.0"
