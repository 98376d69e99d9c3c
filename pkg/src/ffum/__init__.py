"""Deterministic federated learning and f-divergence federated unlearning."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
