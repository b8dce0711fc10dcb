"""Resolution-robust 3D MRI reconstruction with 2D diffusion priors."""

__version__ = "0.1.0"
