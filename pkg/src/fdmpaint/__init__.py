"""Pluralistic image inpainting with a VQ codebook and feature dequantization."""

__version__ = "0.1.0"
