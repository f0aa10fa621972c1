"""Transfer learning toolkit for NIR-VIS heterogeneous face recognition."""

__version__ = "0.1.0"
