"""Differentiable-physics training and benchmarking for panoramic-depth
multi-agent quadrotor navigation."""

__version__ = "0.1.0"
