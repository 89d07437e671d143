"""Bridge between external TorchScript models and nucseg interchange files."""

__version__ = "0.1.0"
