"""Hyperspectral pest detection: Soft PLS-DA, sparse band selection, U-Net."""

__version__ = "0.1.0"
