"""4D semantic occupancy generation: plane-factorized VAE + diffusion transformer."""

__version__ = "0.1.0"
