"""Video visible-infrared person re-identification with temporal memory refinement."""

__version__ = "0.1.0"
