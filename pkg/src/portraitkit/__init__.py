"""Diffusion-control toolkit for portrait stylization, checked against analytic score oracles."""

__version__ = "0.1.0"
