"""Static metric extensions of boundary data on the exterior of the unit ball."""

__version__ = "0.1.0"
