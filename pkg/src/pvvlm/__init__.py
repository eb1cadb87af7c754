"""Multimodal intra-hour PV power forecaster."""

__version__ = "0.1.0"
