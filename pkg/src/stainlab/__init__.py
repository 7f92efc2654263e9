"""Numerical core for prompt-guided virtual IHC staining: stain optics, consistency losses, metrics."""

__version__ = "0.1.0"
