"""Learning nonlinear feedback policies with built-in robust stability certificates.

The package combines gain-bounded recurrent equilibrium networks with a Youla
augmentation of a robust linear base controller, so every point of the
unconstrained parameter space is a provably stabilizing policy for the whole
uncertain plant family.
"""

from .baselines import LstmCell, RnnCell, param_count
from .evaluation import (
    EvalReport,
    build_report,
    contraction_diagnostic,
    lqr_oracle_cost,
    robust_baseline_cost,
    shifted_eval,
    test_cost,
)
from .errors import ConfigError, NumericalError
from .lti import StateSpace, dlqr, hinf_norm, spectral_radius, zoh_discretize
from .plant import (
    CartPoleConfig,
    ConstantDisturbance,
    IidUniformDisturbance,
    NoDisturbance,
    Scenario,
    SinusoidDisturbance,
    UncertainPlant,
    build_plant,
    cartpole_ct,
    make_scenarios,
    plant_step,
    sample_scenario,
)
from .policy import (
    CARTPOLE_ROBUST_GAIN,
    BaseController,
    CtrlPolicy,
    YoulaPolicy,
    compute_alpha,
    ctrl_step,
    gamma_from_alpha,
    gdelta_realization,
    thm1_check,
    verify_base_controller,
    youla_step,
)
from .ren import (
    IqcSpec,
    Ren,
    RenDims,
    RenFreeParams,
    RenWeights,
    direct_construct,
    empirical_gain,
    equilibrium_solve,
    lmi_certificate,
    ren_step,
    theta_length,
)
from .train import (
    EconomicCost,
    QuadraticCost,
    Rollout,
    SoftInputCost,
    TrainConfig,
    Trainer,
    WeightedL1Cost,
    empirical_cost,
    grad,
    optimizer_step,
    rollout,
    stage_cost,
    train,
)

__version__ = "0.1.0"
