"""Forward simulation and parameter estimation for PET time-activity curves.

The package covers one pipeline: simulate TACs from a one-tissue or
lp-ntPET compartment model, summarise them, and estimate parameters by
cached rejection ABC, weighted least squares over a basis library, or
random-walk MCMC.
"""

from .abc import (
    NarrowingStage,
    PosteriorSet,
    SimCache,
    UniformBox,
    abc_best_k,
    abc_reject,
    build_cache,
    default_priors,
    load_cache,
    narrow_ranges,
    narrow_sequence,
    percentile_tolerance,
    save_cache,
)
from .errors import (
    DegenerateFit,
    EmptyPosterior,
    EmptyPosteriorWarning,
    FormatError,
    GridMismatch,
    KindMismatch,
    MissingContext,
    NegativeActivity,
    NoValidFit,
    RankDeficient,
    SingularStep,
    SmallPosteriorWarning,
    TacAbcError,
)
from .kinetics import (
    PARAM_NAMES,
    InputCurve,
    LpNtPetParams,
    OneTissueParams,
    ResponseTiming,
    Tac,
    TimeGrid,
    activation_preset,
    default_grid,
    input_curve_from_csv,
    lp_ntpet_forward,
    one_tissue_forward,
    read_tac_csv,
    reference_input,
    response_h,
    simulation_count,
    write_tac_csv,
)
from .mcmc import GaussianErrorModel, McmcResult, log_likelihood, rw_metropolis
from .noise import DEFAULT_NOISE_SCALES, NoiseLevel, apply_poisson, derive_seed
from .ppc import PredictiveBands, coverage, predictive_bands, write_bands_csv
from .summaries import (
    SplineSmoother,
    SummaryContext,
    SummaryKind,
    SummaryVector,
    distance,
    s3_scales,
    spline_smooth,
    summarize,
)
from .wls import (
    BasisLibrary,
    WlsFit,
    build_basis_library,
    design_consistent_tac,
    design_matrix,
    sample_timing_library,
    wls_fit_grid,
    wls_solve,
)

__version__ = "0.1.0"
