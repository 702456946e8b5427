"""Segmented containers, collectives and command queues over simulated devices,
with a nonlinear-inversion parallel MRI reconstruction built on top."""

from .errors import (
    AllocationError,
    ConfigError,
    KernelError,
    MultiDevError,
    ReconstructionDiverged,
    UnsupportedTopologyError,
    UsageError,
)
from .runtime import DevGroup, Environment, Fence, Passthrough, create_environment, current_rank
from .segvec import Blockwise, Clone, Natural, Overlap2D, SegVector, create_segmented
from .topology import PathKind, Topology, TransferLedger

__all__ = [
    "AllocationError",
    "Blockwise",
    "Clone",
    "ConfigError",
    "DevGroup",
    "Environment",
    "Fence",
    "KernelError",
    "MultiDevError",
    "Natural",
    "Overlap2D",
    "Passthrough",
    "PathKind",
    "ReconstructionDiverged",
    "SegVector",
    "Topology",
    "TransferLedger",
    "UnsupportedTopologyError",
    "UsageError",
    "create_environment",
    "create_segmented",
    "current_rank",
]

__version__ = "0.1.0"
