"""Hybrid stochastic model of the transcriptional feed-forward loop.

Forward simulation of protein diffusions driven by telegraph promoters,
mean-field variational inference of latent promoter activity from sparse
noisy protein readouts, and variational EM for the kinetic parameters.
"""

from .errors import (
    ConfigError,
    ConvergenceError,
    GridCoverageError,
    InternalConsistencyError,
    RankDeficiencyError,
    StepSizeError,
    ValidationError,
)
from .inference import (
    InferenceOptions,
    VariationalState,
    discretize,
    free_energy,
    infer,
    run_inference,
)
from .learning import LearnOptions, LearnResult, learn
from .model import (
    FflModel,
    GeneKinetics,
    GeneUnit,
    SwitchingParams,
    expected_switch_rate_on,
    ou_mean,
    steady_state_on_prob,
    switch_rate_on,
    validate_model,
)
from .simulate import (
    HybridTrajectory,
    ObservationSet,
    PromoterInput,
    TimeGrid,
    generate_observations,
    simulate_ensemble,
    simulate_hybrid,
    solve_master_equation,
)

__version__ = "0.1.0"
