"""Penalized heat-flow construction and verification of manifold-valued BSDEs."""

from .benchmarks import get_benchmark, list_benchmarks
from .config import ExperimentConfig, load_config
from .generators import Generator, eval_extended_generator, eval_generator, make_generator
from .geometry import (
    CutoffProfile,
    EmbeddedManifold,
    dist_to_manifold,
    extended_sff,
    make_manifold,
    penalty_gradient,
    penalty_potential,
    project_to_manifold,
    second_fundamental_form,
    tangent_project,
    verify_key_inequality,
)
from .pde import (
    FieldState,
    TorusGrid,
    Trajectory,
    cfl_max_dt,
    compare_solvers,
    discrete_gradient,
    discrete_laplacian,
    initialize_from_map,
    solve_intrinsic_m1,
    solve_penalized,
    step_intrinsic_m1,
    step_penalized,
)
from .bsde import (
    BrownianPath,
    BSDESample,
    assemble_bsde_sample,
    bsde_residual,
    martingale_path,
    martingale_test,
    on_manifold_defect,
    sample_brownian,
    tangency_defect,
    weak_residual,
)
from .diagnostics import (
    MonitorRecord,
    ParabolicWindow,
    energy_record,
    heat_kernel,
    phi_quantity,
    psi_quantity,
    regularity_scan,
    singular_set_detect,
)
from .experiment import RunReport, convergence_study, run_experiment

__version__ = "0.1.0"
