"""Event-driven hard spheres on the 3-torus with cluster statistics."""

__version__ = "0.1.0"
