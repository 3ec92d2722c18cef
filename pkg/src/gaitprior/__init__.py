"""Command-conditioned diffusion style prior with constrained, symmetry-regularised PPO on a planar quadruped."""

__version__ = "0.1.0"
