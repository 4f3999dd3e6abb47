from .config import *
from .geometry import *
from .particles import *
from .deposit import *
from .fieldsolve import *
from .push import *
from .transport import *
from .diagnostics import *
from .kernel import *
from .simulation import *

__all__ = [
    "RunParams",
    "SizeLabel",
    "PushLoop",
    "ConfigError",
    "InvariantError",
    "parse_config",
    "serialize_config",
    "normalize_config",
    "TorusGrid",
    "RankWindow",
    "build_grid",
    "equal_area_radii",
    "memory_footprint",
    "ParticleStore",
    "CapacityError",
    "NumericalError",
    "GridScalar",
    "GridVector",
    "charge",
    "GyroOperator",
    "GridKernels",
    "poisson",
    "potential",
    "Pusher",
    "PushStats",
    "RankTopology",
    "Transport",
    "TransportError",
    "KernelId",
    "KernelTimings",
    "History",
    "weak_scaling_harness",
    "growth_phase",
    "GrowthPhase",
    "Simulation",
    "run_main",
    "main"
]
