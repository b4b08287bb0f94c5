"""Statistical water-balance modelling for large lake systems.

Monthly Bayesian inference over precipitation, evaporation, runoff,
channel flows and diversions, constrained by observed water-level changes
across configurable accounting windows, with multi-chain Gibbs/slice MCMC,
convergence and closure diagnostics, and a factorial experiment harness.
"""

__version__ = "0.1.0"

from .ingest import (
    CUMULATIVE,
    AlignedTable,
    ComponentSeries,
    DeltaHObservations,
    IngestError,
    SeriesDecl,
    Span,
    align,
    delta_h,
    load_series,
    write_series,
)
from .network import (
    COMPONENTS,
    UPSTREAM_ROUTING,
    BuildError,
    LatentState,
    ModelConfig,
    Network,
    build,
    deviance,
    expected_node_counts,
    format_model_id,
    full_conditional,
    log_joint,
    make_config,
    parse_model_id,
    simulate_observations,
    to_dot,
    toy_network,
)
from .priors import (
    DEFAULT_RULES,
    FitRules,
    PriorCell,
    PriorError,
    PriorSpec,
    fit_all,
    fit_gamma_thom,
    fit_lognormal,
    fit_normal,
)
from .sampler import (
    SampleStore,
    SamplerError,
    SamplerSettings,
    SliceFailureError,
    gibbs_step,
    init_state,
    run,
    slice_sample,
)

__all__ = [
    "__version__",
    "CUMULATIVE",
    "AlignedTable",
    "ComponentSeries",
    "DeltaHObservations",
    "IngestError",
    "SeriesDecl",
    "Span",
    "align",
    "delta_h",
    "load_series",
    "write_series",
    "COMPONENTS",
    "UPSTREAM_ROUTING",
    "BuildError",
    "LatentState",
    "ModelConfig",
    "Network",
    "build",
    "deviance",
    "expected_node_counts",
    "format_model_id",
    "full_conditional",
    "log_joint",
    "make_config",
    "parse_model_id",
    "simulate_observations",
    "to_dot",
    "toy_network",
    "DEFAULT_RULES",
    "FitRules",
    "PriorCell",
    "PriorError",
    "PriorSpec",
    "fit_all",
    "fit_gamma_thom",
    "fit_lognormal",
    "fit_normal",
    "SampleStore",
    "SamplerError",
    "SamplerSettings",
    "SliceFailureError",
    "gibbs_step",
    "init_state",
    "run",
    "slice_sample",
]
