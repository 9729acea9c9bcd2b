"""Generalizable semantic neural radiance fields at desk scale."""

__version__ = "0.1.0"
