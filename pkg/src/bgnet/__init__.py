"""Bilinear graph networks for visual question answering at desk scale."""

__version__ = "0.1.0"
