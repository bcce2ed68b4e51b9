"""Dynamic event-study panels: QMLE for common dynamics plus empirical-Bayes
recovery of unit-level treatment-effect trajectories."""
from __future__ import annotations

__version__ = "0.1.0"

from .model import (
    CommonParams,
    EffectRepresentation,
    EventDesign,
    PanelData,
    PriorParams,
    UnitEffects,
    composite_error_cov,
    design_matrix,
    effect_representation,
    initial_condition_coeffs,
    lag_propagation_matrix,
    transformed_outcomes,
)
from .ebayes import (
    EbResult,
    SuffStats,
    compound_risk,
    fit_kernel,
    fit_mixture,
    fit_oracle,
    fit_parametric,
    sufficient_stats,
    tweedie,
)
from .qmle import QmleNonConvergence, QmleOptions, QmleResult, fit, moment_init
from .simulate import DgpSpec, PriorSpec, SimulatedPanel, design_by_name, simulate, simulation_grid
from .baselines import EventStudyFit, ovb_demo, twfe, twfe_ar1
from .waldtests import (
    WaldTest,
    default_tests,
    joint_independence_test,
    parallel_trends_test,
    rc_test,
    state_dependence_test,
    wald,
)
from .dataio import aggregate_monthly, ingest_csv, panel_to_frame
from .montecarlo import McConfig, McReport, run_montecarlo
from .pipeline import PipelineOptions, PipelineResult, fit_pipeline, write_pipeline_outputs

__all__ = [
    "__version__",
    "CommonParams",
    "EffectRepresentation",
    "EventDesign",
    "PanelData",
    "PriorParams",
    "UnitEffects",
    "composite_error_cov",
    "design_matrix",
    "effect_representation",
    "initial_condition_coeffs",
    "lag_propagation_matrix",
    "transformed_outcomes",
    "EbResult",
    "SuffStats",
    "compound_risk",
    "fit_kernel",
    "fit_mixture",
    "fit_oracle",
    "fit_parametric",
    "sufficient_stats",
    "tweedie",
    "QmleNonConvergence",
    "QmleOptions",
    "QmleResult",
    "fit",
    "moment_init",
    "DgpSpec",
    "PriorSpec",
    "SimulatedPanel",
    "design_by_name",
    "simulate",
    "simulation_grid",
    "EventStudyFit",
    "ovb_demo",
    "twfe",
    "twfe_ar1",
    "WaldTest",
    "default_tests",
    "joint_independence_test",
    "parallel_trends_test",
    "rc_test",
    "state_dependence_test",
    "wald",
    "aggregate_monthly",
    "ingest_csv",
    "panel_to_frame",
    "McConfig",
    "McReport",
    "run_montecarlo",
    "PipelineOptions",
    "PipelineResult",
    "fit_pipeline",
    "write_pipeline_outputs",
]
