"""Data-driven probabilistic L2-gain stabilization from noisy trajectories."""

__version__ = "0.1.0"
