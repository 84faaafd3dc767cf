"""metamesh: metastability analysis of walking controllers by meshing their Poincare section."""

__version__ = "0.1.0"
