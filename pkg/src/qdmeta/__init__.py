"""Meta-evolved feature-maps for MAP-Elites on a damaged planar arm."""

__version__ = "0.1.0"
