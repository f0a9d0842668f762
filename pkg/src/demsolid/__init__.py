"""Meshfree hyperelastic solids: neural displacement fields trained by energy or residual losses."""
from . import dem, fem, geometry, material, pinn, renderer, sampling
from .config import SceneConfig, load_config
from .dem import DemProblem, OptimizerConfig, TrainReport, predict, train
from .errors import DemSolidError
from .material import MaterialParams, elasticity_tangent, first_pk_stress, strain_energy_density
from .neural_field import DisplacementField
from .pinn import PinnProblem, pinn_train
from .pipeline import compare_solvers, run_pipeline, validate_cloud

__version__ = "0.1.0"

__all__ = [
    "DemProblem", "DemSolidError", "DisplacementField", "MaterialParams", "OptimizerConfig", "PinnProblem",
    "SceneConfig", "TrainReport", "compare_solvers", "dem", "elasticity_tangent", "fem", "first_pk_stress",
    "geometry", "load_config", "material", "pinn", "pinn_train", "predict", "renderer", "run_pipeline",
    "sampling", "strain_energy_density", "train", "validate_cloud",
]
