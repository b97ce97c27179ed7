"""Federated semi-supervised learning with shared class prototypes."""
from .kernels import BACKEND
from .numerics import NetworkConfig, OptimizerConfig, ParameterSet
from .protonet import PrototypeSet, SslHyperparams

__all__ = ["BACKEND", "NetworkConfig", "OptimizerConfig", "ParameterSet", "PrototypeSet",
           "SslHyperparams"]
__version__ = "0.1.0"
