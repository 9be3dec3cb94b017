"""GGD-statistics guided diffusion restoration at desk scale."""

__version__ = "0.1.0"
