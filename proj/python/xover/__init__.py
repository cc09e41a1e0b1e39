"""Causal analysis of cross-over (TQT) trials.

Thin re-export of the compiled extension; see the repository README for the
CLI and file formats.
"""

from xover._core import (  # noqa: F401
    CovarianceStructure,
    EffectEstimate,
    EstimatorConfig,
    FittedWorkingModel,
    GeneratorModel,
    JointEffect,
    MeanStructure,
    SimulationCell,
    SimulationConfig,
    SimulationReport,
    TestConfig,
    TestResult,
    TrialDataset,
    XoverError,
    __version__,
    all_estimator_configs,
    average_baseline,
    fit_generator,
    fit_wls,
    influence_mu2,
    influence_mu3,
    ingest_csv,
    iu_test,
    joint_effect,
    mu1,
    mu2,
    mu3,
    positive_control_test,
    run_study,
    simulate_trial,
    write_csv,
)
