"""Resample-move sequential Monte Carlo for static epidemic parameters."""
from .icc import ICCUndefinedError, icc
from .kernels import (
    KERNELS,
    ConditionalGaussian,
    KernelConfig,
    KernelDegeneracyError,
    KernelStats,
    MHKernel,
    conditional_gaussian,
    propose_approx_gibbs,
    propose_componentwise_rw,
    propose_correlated_rw,
    propose_marginal_block,
    run_kernel_chain,
    weighted_moments,
)
from .sampler import ParticleSet, RejuvenationRecord, SMCSampler, StaleSampleWarning, StepReport, substream, weighted_quantile
from .weights import (
    DegenerateWeightsError,
    ess,
    ess_from_log,
    log_mean_increment,
    normalise_log_weights,
    residual_resample,
    reweight,
    solve_next_temperature,
)
