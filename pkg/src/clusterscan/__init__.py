"""Cluster-centric state-space image restoration in numpy.

Modules:

* :mod:`~clusterscan.autodiff`: tape-based reverse-mode tensors
* :mod:`~clusterscan.nn`: convolution, normalization, DFT, sampling
* :mod:`~clusterscan.aggregate`, :mod:`~clusterscan.scan`, :mod:`~clusterscan.diffuse`:
  centroid aggregation, the selective scan, and weight diffusion back to pixels
* :mod:`~clusterscan.blocks`, :mod:`~clusterscan.network`: blocks, U-Net, loss, optimizer
* :mod:`~clusterscan.costs`: analytic MAC/FLOP accounting
* :mod:`~clusterscan.cli`: command-line tools
"""

from .autodiff import ContractError, ShapeError, Tape, Tensor, get_dtype, precision, set_precision, tensor
from .network import NetworkConfig, build, forward, loss, full_config, smoke_config, train_step

__all__ = [
    "ContractError",
    "NetworkConfig",
    "ShapeError",
    "Tape",
    "Tensor",
    "build",
    "forward",
    "get_dtype",
    "loss",
    "full_config",
    "precision",
    "set_precision",
    "smoke_config",
    "tensor",
    "train_step",
]
