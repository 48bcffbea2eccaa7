"""Determined multichannel source separation: ILRMA and the multichannel VAE."""

__version__ = "0.1.0"
