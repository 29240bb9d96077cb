"""Subspace-separating convolutional autoencoder with a class-specific
self-expressiveness layer, plus subspace geometry analysis and classifiers."""

__version__ = "0.1.0"
