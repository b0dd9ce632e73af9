"""Class activation feature attack (CAFA) and denoiser defense (CAFD) on a toy image classifier."""

__version__ = "0.1.0"
