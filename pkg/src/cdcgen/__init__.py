"""Cross-domain conditional generation with aligned normalizing flows."""

__version__ = "0.1.0"
