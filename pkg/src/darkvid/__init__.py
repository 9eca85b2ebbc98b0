"""darkvid: low-light RGB/NIR video noise synthesis, denoising, and evaluation."""

__version__ = "0.1.0"
