"""Modulated scanning diffraction imaging toolkit.

Simulates modulated scanning-diffraction datasets, recovers per-frame exit
waves through the downstream wavefront modulator, registers the recovered
object patches to find the scan positions and any probe drift, and assembles
the full complex sample image.
"""

from .field import ComplexField, Geometry

__all__ = ["ComplexField", "Geometry"]
__version__ = "0.1.0"
