"""Multimodal MCMC with wormhole metrics and optimization-driven mode discovery."""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
