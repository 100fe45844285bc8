"""Siamese recurrent autoencoder embeddings for phone-level speech error detection."""

__version__ = "0.1.0"
