"""Relightable Gaussian-splat simulator: splat rendering with editable SH
illumination, occlusion probe fields, quadrotor dynamics, and an RL
navigation environment served over TCP."""

__version__ = "0.1.0"
