"""Traffic-flow forecasting with multi-period similarity attention.

A desk-scale implementation of the EMBSFormer architecture: parallel
flow-generation branches that look up historically similar moments via
similarity attention, fused with a stacked flow-transition encoder
(spatio-temporal self-attention plus Chebyshev graph convolution). All
numerics run on the in-package reverse-mode autodiff engine.
"""

from embsformer.tensor import Tensor, backward, gradient_check, no_grad
from embsformer.graph import (
    ChebyshevBasis,
    TrafficGraph,
    cheb_graph_conv,
    chebyshev_basis,
    estimate_lambda_max,
    normalized_laplacian,
)
from embsformer.model import ModelConfig, ModelParameters, forward, init_params
from embsformer.training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "gradient_check",
    "no_grad",
    "TrafficGraph",
    "ChebyshevBasis",
    "normalized_laplacian",
    "estimate_lambda_max",
    "chebyshev_basis",
    "cheb_graph_conv",
    "ModelConfig",
    "ModelParameters",
    "init_params",
    "forward",
    "TrainConfig",
    "train",
    "evaluate",
    "__version__",
]
