"""Thin-plate AFC simulation and complex elastic-moduli identification.

The library covers the forward chain (strip mesh, Morley plate elements,
frequency-domain solves, modal analysis) and the inverse chain (loss over
measured or synthetic AFC data with exact derivatives, trust-region
Newton/BFGS polish seeded by differential evolution).
"""

from .errors import (
    EigenSolverError,
    GeometryError,
    InfeasibleParametersError,
    MeshFileError,
    PlatefitError,
    SolverError,
)
from .forward import (
    FrequencyResponse,
    MaterialParams,
    ModalResult,
    afc_peak_indices,
    natural_modes,
    probe,
    solve_frequency,
    sweep,
    system,
)
from .inverse import (
    DEOptions,
    FitResult,
    ObjectiveBundle,
    TrustRegionOptions,
    differential_evolution,
    fit_global,
    make_objective,
    relative_errors,
    solve_tr_subproblem,
    trust_region_minimize,
)
from .mesh import GeometryConfig, Mesh, generate_strip_mesh, load_mesh, save_mesh
from .plate_fem import (
    ALPHAS,
    ConstantOperators,
    DofMap,
    MorleyBasis,
    assemble,
    assemble_global_matrices,
    build_dof_map,
    element_matrices,
    interpolation_dofs,
    morley_basis,
)
from .sensitivity import (
    IsotropicParametrization,
    MonoclinicParametrization,
    Parametrization,
    ReferenceData,
    ScaledGlobalParametrization,
    central_difference_gradient,
    central_difference_jacobian,
    loss,
    loss_grad,
    loss_hess,
    synthesize_data,
)

__version__ = "0.1.0"
