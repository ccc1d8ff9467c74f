"""Latent multivariate Hawkes processes: simulation, INAR discretisation and identification."""

from .cumulants import (
    CPFactors,
    CumulantTensor,
    cp_decompose,
    estimate_cumulant,
    kruskal_check,
    kruskal_rank,
    nonzero_cumulant_scan,
    whitened_cp,
)
from .errors import HawkesIdError, NotIdentifiableError, UnstableModelError, ValidationError
from .evaluate import convergence_suite, kernel_error, mcc
from .identify import (
    EnvironmentSet,
    Intervention,
    KernelDag,
    align,
    assemble_polysystem,
    embed_kernel_dag,
    recover_baseline,
    solve_kernels,
    variety_dimension,
)
from .model import Exponential, HawkesModel, PowerLaw, Rectangular, Zero, check_stability, transfer_matrix
from .simulate import (
    BinnedCounts,
    EventSequence,
    MixingMap,
    Observation,
    bin_events,
    make_generic_linear,
    make_mlp_mixing,
    mix,
    simulate,
    simulate_inar,
)
from .spectral import (
    SpectralDensity,
    SpectralFactor,
    convolution_prior_params,
    estimate_psd,
    recover_transfer,
    wiener_khinchin_cov,
    wilson_factorize,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
