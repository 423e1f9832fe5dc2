"""Contextual hypernetworks for adapting a partial VAE to newly added features."""

__version__ = "0.1.0"
