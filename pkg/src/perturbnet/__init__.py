"""Forward-pass-only training of feed-forward networks by node perturbation."""

from .learners import RuleConfig, RuleKind, UpdateSet
from .network import Network, NetworkSpec, forward, init_network
from .numerics import DegenerateInputError, InvalidParameterError, RngStream

__version__ = "0.1.0"

__all__ = ["DegenerateInputError", "InvalidParameterError", "Network", "NetworkSpec", "RngStream",
           "RuleConfig", "RuleKind", "UpdateSet", "forward", "init_network"]
