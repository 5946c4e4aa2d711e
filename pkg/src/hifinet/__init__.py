"""Haar-wavelet fusion network for underwater image enhancement."""
from .haar import HaarDecomposition, haar_forward, haar_inverse, make_five_inputs
from .network import ABLATIONS, NetConfig, NetworkParams, hifi_forward, init_params
from .tensor import GradTape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS",
    "GradTape",
    "HaarDecomposition",
    "NetConfig",
    "NetworkParams",
    "Tensor",
    "backward",
    "haar_forward",
    "haar_inverse",
    "hifi_forward",
    "init_params",
    "make_five_inputs",
]
