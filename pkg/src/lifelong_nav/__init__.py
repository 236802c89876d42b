"""Lifelong self-improving robot navigation at desk scale: an occupancy-grid
simulator, a Dynamic Window Approach initial policy, a small MLP policy and
Gradient Episodic Memory training on self-mined corrections."""

__version__ = "0.1.0"
