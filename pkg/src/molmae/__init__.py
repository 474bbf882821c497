"""Bi-branch masked graph-transformer autoencoder for molecular graphs."""

__version__ = "0.1.0"
