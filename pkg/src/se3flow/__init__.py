"""Rectified flows on SE(3) for trajectory-level manipulation policies."""

__version__ = "0.1.0"
