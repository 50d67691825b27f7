"""Posterior density estimation from expensive, noisy log-likelihoods.

The pipeline: Monte-Carlo log-mean estimates with quantified noise feed a
Matern 5/2 Gaussian-process surrogate; Metropolis-adjusted Langevin chains
run on independently sampled surrogate realizations; kernel density
estimates of the chains form an ensemble whose pointwise variance drives
where the expensive function is evaluated next.
"""

from .benchmark import (
    AnalyticProblem,
    benchmark_noise_variance,
    g_analytic,
    grad_y_exact,
    reference_posterior_samples,
    wasserstein1,
    y_exact,
)
from .ensemble import (
    CalibrationHistory,
    CalibrationSettings,
    EnsembleEstimate,
    RunBudget,
    estimate_density,
    estimate_variance,
    maximin_design,
    run_calibration,
    select_batch,
    select_next_point,
    space_filling_next,
)
from .exceptions import (
    DegenerateLikelihoodError,
    DegenerateSampleError,
    GpmalaError,
    IllConditionedGramError,
    InsufficientChainError,
)
from .gp import (
    FitConfig,
    KernelParams,
    PosteriorGP,
    TrainingData,
    condition,
    fit_hyperparameters,
    kernel_gradients,
    log_marginal_likelihood,
    matern52_kernel,
    merge_duplicate_points,
    predict,
    predict_joint_with_gradient,
)
from .kde import KdeModel, evaluate, fit_kde, log_evaluate, sample_cov_sqrt, select_window
from .mala import (
    Chain,
    MalaConfig,
    log_proposal,
    mala_step_deterministic,
    postprocess,
    run_mala_deterministic,
    run_mala_on_trajectory,
    tune_step_size,
)
from .noise import NoisyObservation, bootstrap_variance, mc_log_estimate, mc_log_estimate_from_logs
from .trajectory import TrajectoryState

__version__ = "0.1.0"
