"""Dual-branch adversarial adaptation for cross-device super-resolution, on a synthetic camera lab."""

__version__ = "0.1.0"
