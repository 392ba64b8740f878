"""Environment-sensing beam prediction workbench for simulated smart factories."""

__version__ = "0.1.0"
