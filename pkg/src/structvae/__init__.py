"""Structured-covariance VAE regularisers for compressed-sensing MRI."""

__version__ = "0.1.0"
