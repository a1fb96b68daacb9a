"""Level-set finite-element simulation of interface migration with inclination-dependent energy."""

from .bench import EllipseExact, RunRecord, ellipse_exact_state, fit_convergence, l2_error, measure_a, measure_b
from .energy import EnergyModel, InadmissibleModelError, check_positive_definite, d_tensor, get_model
from .fem import StepParams, advance, assemble_step, solve
from .levelset import LevelSet, UniformSignError, extract_contour, reinitialize
from .mesh import NodalField, TriMesh, generate_rect_mesh, import_gmsh
from .sim import SimConfig, compare_iso_aniso, run

__version__ = "0.1.0"

__all__ = [
    "EllipseExact",
    "EnergyModel",
    "InadmissibleModelError",
    "LevelSet",
    "NodalField",
    "RunRecord",
    "SimConfig",
    "StepParams",
    "TriMesh",
    "UniformSignError",
    "advance",
    "assemble_step",
    "check_positive_definite",
    "compare_iso_aniso",
    "d_tensor",
    "ellipse_exact_state",
    "extract_contour",
    "fit_convergence",
    "generate_rect_mesh",
    "get_model",
    "import_gmsh",
    "l2_error",
    "measure_a",
    "measure_b",
    "reinitialize",
    "run",
    "solve",
]
