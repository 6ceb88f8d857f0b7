"""Kernel-filter image denoising: analytic CNN tangent kernels, a finite-width
simulator, Nystrom compression, and twicing-style iterative filters."""

from .arch import ArchSpec, Conv, Down, Relu, Up, autoencoder_arch, deep_vanilla_arch, vanilla_arch
from .denoise import (
    NlmParams,
    TwicingTrace,
    gp_posterior,
    nlm_filter,
    predict_mse,
    twicing_matrix,
    twicing_spectral,
)
from .errors import ConfigError, DivergenceError, UnsupportedArchitectureError
from .images import (
    PSNR_CAP_DB,
    ImageTensor,
    NoiseModel,
    add_gaussian_noise,
    from_unit,
    load_png,
    psnr,
    save_png,
    synthetic_house,
)
from .kernels import (
    KernelMatrix,
    ResampleOperator,
    a_map,
    resample_conjugate,
    v_map_relu,
    vprime_map_relu,
)
from .ntk import (
    NtkResult,
    backward_covariance,
    closed_form_vanilla_kernel,
    forward_covariance,
    kernel_columns,
    ntk_recursion,
)
from .nystrom import NystromFactors, nystrom_factorize, sample_columns
from .simulator import (
    FiniteCnnState,
    TrainResult,
    WeightChangeReport,
    empirical_ntk,
    forward,
    init_state,
    make_optimizer,
    ntk_top_eigenvalue,
    preactivation_eigenvectors,
    train,
    tune_gd_learning_rate,
)

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "Conv",
    "Relu",
    "Down",
    "Up",
    "vanilla_arch",
    "deep_vanilla_arch",
    "autoencoder_arch",
    "ConfigError",
    "DivergenceError",
    "UnsupportedArchitectureError",
    "ImageTensor",
    "PSNR_CAP_DB",
    "NoiseModel",
    "load_png",
    "save_png",
    "from_unit",
    "add_gaussian_noise",
    "psnr",
    "synthetic_house",
    "KernelMatrix",
    "ResampleOperator",
    "a_map",
    "v_map_relu",
    "vprime_map_relu",
    "resample_conjugate",
    "NtkResult",
    "ntk_recursion",
    "forward_covariance",
    "backward_covariance",
    "kernel_columns",
    "closed_form_vanilla_kernel",
    "NystromFactors",
    "sample_columns",
    "nystrom_factorize",
    "TwicingTrace",
    "twicing_matrix",
    "twicing_spectral",
    "predict_mse",
    "gp_posterior",
    "NlmParams",
    "nlm_filter",
    "FiniteCnnState",
    "init_state",
    "forward",
    "train",
    "TrainResult",
    "WeightChangeReport",
    "make_optimizer",
    "empirical_ntk",
    "ntk_top_eigenvalue",
    "tune_gd_learning_rate",
    "preactivation_eigenvectors",
    "__version__",
]
