"""Template-based 3D scene parsing from single depth images."""

__version__ = "0.1.0"
