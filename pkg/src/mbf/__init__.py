"""Mini-block Fisher preconditioning and second-order baselines in NumPy."""

__version__ = "0.1.0"
