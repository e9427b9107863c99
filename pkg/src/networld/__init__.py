"""Multi-task latent diffusion world model for decentralised wireless control."""

__version__ = "0.1.0"
