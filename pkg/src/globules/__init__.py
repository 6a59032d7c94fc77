"""Hard-core Brownian globules: reflected dynamics, stationary samplers and
statistical diagnostics for finite systems of spheres with Brownian centers
and Brownian radii."""

__version__ = "0.1.0"

from .core import (
    BoundaryContact,
    Configuration,
    DegenerateContactError,
    Globule,
    ModelParams,
    allowed,
    cluster,
    compatibility_constant,
    exterior_sphere_constant,
    pair_normal,
    pushback_vector,
    sigma_stretch,
    sigma_unstretch,
)
from .dynamics import (
    DriveIncrements,
    LocalTimeLedger,
    NoisePlan,
    ProjectionError,
    SimulationAborted,
    StepResult,
    StepSizeError,
    TrajectoryRecord,
    drift,
    normal_reflection_step,
    project_to_allowed,
    simulate,
    step,
    time_reverse,
)
from .penalization import (
    PenalizationSpec,
    QuadratureError,
    integrability_check,
    psi,
    psi_gradient,
)
from .sampler import (
    WindowSpec,
    partition_function_oracle,
    penalized_window,
    sample_hard_poisson,
    sample_penalized,
    sample_penalized_ensemble,
)
from .diagnostics import (
    ChainReport,
    PathRegularityParams,
    detect_chain,
    localization_sets,
    modulus_of_continuity,
    nice_path_membership,
    reversibility_statistic,
    scaling_fit_chain_probability,
    scaling_fit_modulus_tail,
)
