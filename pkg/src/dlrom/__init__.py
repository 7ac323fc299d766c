"""Convolutional-autoencoder reduced order models for 1D parametric diffusion.

The pipeline maps parameters mu to latent Fourier codes with a small ReLU
network, then decodes them to grid values with an explicitly constructed
ReLU CNN.
"""

from .constructor import (
    CompactSampleSet,
    TheoryBudget,
    build_decoder_cnn,
    build_linear_decoder,
    compute_budget,
    linear_to_relu,
)
from .estimators import DLROM, ConvDecoder, FourierLiftEncoder, ReducedNetworkRegressor
from .exceptions import DLROMError
from .fourier_lift import (
    SmoothFunction,
    apply_T,
    b_map,
    b_pinv,
    build_hermite_basis,
    encode_grid,
    periodicize,
    synthesize_dense,
)
from .neural import Conv1d, Dense, Network, Reshape, TConv1d, accounting, conv_to_dense
from .pde_fom import AffineDiffusionProblem, Grid, GridFunction, sample_params, solve_fom
from .training import (
    Dataset,
    TrainConfig,
    bound_rhs,
    evaluate_rom,
    l21_norm,
    loss,
    make_dataset,
    train_encoder,
    train_reduced,
)

__version__ = "0.1.0"

__all__ = [
    "AffineDiffusionProblem",
    "CompactSampleSet",
    "Conv1d",
    "ConvDecoder",
    "DLROM",
    "DLROMError",
    "Dataset",
    "Dense",
    "FourierLiftEncoder",
    "Grid",
    "GridFunction",
    "Network",
    "ReducedNetworkRegressor",
    "Reshape",
    "SmoothFunction",
    "TConv1d",
    "TheoryBudget",
    "TrainConfig",
    "accounting",
    "apply_T",
    "b_map",
    "b_pinv",
    "bound_rhs",
    "build_decoder_cnn",
    "build_hermite_basis",
    "build_linear_decoder",
    "compute_budget",
    "conv_to_dense",
    "encode_grid",
    "evaluate_rom",
    "l21_norm",
    "linear_to_relu",
    "loss",
    "make_dataset",
    "periodicize",
    "sample_params",
    "solve_fom",
    "synthesize_dense",
    "train_encoder",
    "train_reduced",
]
