"""Passive hop-distance inference for block-flooding peer-to-peer overlays."""

__version__ = "0.1.0"
