"""Linear mixed-effects models with integrated Ornstein-Uhlenbeck system noise,
fitted by joint and three-stage Gaussian quasi-likelihood."""

from .errors import (
    ConfigError,
    DomainError,
    InferenceError,
    InputError,
    IntouError,
    NumericalError,
    RankDeficiencyError,
)
from .estimators import (
    ExpansionDiag,
    ExpansionKind,
    FitConfig,
    StageError,
    StepwiseResult,
    default_start,
    expansion_terms,
    fit_joint,
    fit_stepwise,
    sd_scale_report,
    stage1_ols,
    stage2_covariance,
    stage3_gls,
    third_derivative_tensor,
)
from .gqlf import (
    FitResult,
    InfoMatrices,
    ScoreVector,
    gaussian_score_covariance,
    individual_loglik,
    information_criteria,
    joint_gqlf,
    observed_information,
    quasi_kl_diagnostics,
    quasi_score,
    sandwich_estimates,
    studentize,
)
from .model_core import (
    Dataset,
    IndividualData,
    PsiParameterization,
    ThetaParams,
    intou_covariance,
    make_dataset,
    marginal_covariance,
    mean_vector,
    psi_matrix,
    read_dataset,
    write_dataset,
)
from .optimizer import BoundTransform, CoordKind, OptimConfig, from_unconstrained, nelder_mead, to_unconstrained
from .simulate import (
    DesignSpec,
    Driver,
    RandomEffectLaw,
    RngStream,
    Scenario,
    generate_design,
    sample_intou_gaussian,
    sample_ou_levy_path,
    sample_vg,
    simulate_dataset,
    vg_density,
)

__version__ = "0.1.0"
