"""Slice-to-volume CT synthesis with latent diffusion and body-part
regression, evaluated via volumetric body composition on synthetic
abdominal phantoms."""

__version__ = "0.1.0"
