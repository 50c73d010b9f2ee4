"""Shape-constrained recurrent flow matching for 6D object pose refinement."""

__version__ = "0.1.0"
