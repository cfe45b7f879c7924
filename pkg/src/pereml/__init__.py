"""Pure-error and response-surface REML for multi-stratum designs.

Variance components of split-plot, split-split-plot and general nested
block designs are estimated by REML applied either to the full
treatment model (pure-error REML, robust to response-surface
misspecification) or to the second-order polynomial model (standard
REML).  Fixed effects are estimated by empirical GLS with either set of
plug-in components, and standard errors can be Kenward-Roger corrected.
"""

from .design import (
    ModelMatrices,
    MultiStratumDesign,
    PureErrorFeasibility,
    build_full_treatment_matrix,
    build_model_matrices,
    build_second_order_matrix,
    build_stratum_matrices,
    identify_treatments,
    pure_error_feasibility,
    second_order_names,
)
from .errors import (
    AmbiguousTreatmentError,
    ConvergenceError,
    DataSchemaError,
    DegenerateModelError,
    IdentificationError,
    KenwardRogerError,
    NestingError,
    NonPositiveDefiniteError,
    PeremlError,
    RankDeficientError,
)
from .gls import FixedEffectsFit, assemble_sigma, equivalence_check, gls_fit
from .kenward_roger import (
    KRWorkspace,
    kr_adjust_generic,
    kr_adjust_splitplot_closed,
    kr_adjust_splitsplit_closed,
    kr_workspace,
    sigma_inverse_splitsplit_closed,
    with_kr_adjustment,
)
from .reml import (
    PE_TAG,
    RS_TAG,
    RemlContext,
    RemlOptions,
    StratumStructure,
    VarianceEstimate,
    fisher_info,
    fit_reml,
    reml_criterion,
)
from .simulate import (
    GeneratorSpec,
    SimulationReport,
    many_small_terms_scenario,
    run_bias_study,
    simulate_response,
)

__version__ = "0.1.0"

__all__ = [
    "AmbiguousTreatmentError",
    "ConvergenceError",
    "DataSchemaError",
    "DegenerateModelError",
    "FixedEffectsFit",
    "GeneratorSpec",
    "IdentificationError",
    "KenwardRogerError",
    "KRWorkspace",
    "ModelMatrices",
    "MultiStratumDesign",
    "NestingError",
    "NonPositiveDefiniteError",
    "PE_TAG",
    "PeremlError",
    "PureErrorFeasibility",
    "RS_TAG",
    "RankDeficientError",
    "RemlContext",
    "RemlOptions",
    "SimulationReport",
    "StratumStructure",
    "VarianceEstimate",
    "assemble_sigma",
    "build_full_treatment_matrix",
    "build_model_matrices",
    "build_second_order_matrix",
    "build_stratum_matrices",
    "equivalence_check",
    "fisher_info",
    "fit_reml",
    "gls_fit",
    "identify_treatments",
    "kr_adjust_generic",
    "kr_adjust_splitplot_closed",
    "kr_adjust_splitsplit_closed",
    "kr_workspace",
    "many_small_terms_scenario",
    "pure_error_feasibility",
    "reml_criterion",
    "run_bias_study",
    "second_order_names",
    "sigma_inverse_splitsplit_closed",
    "simulate_response",
    "with_kr_adjustment",
]
