"""Template document forging, OCR-constrained CycleGAN training and evaluation."""

__version__ = "0.1.0"
