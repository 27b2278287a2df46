"""Lane segmentation with BEV prior-knowledge fusion."""
__version__ = "0.1.0"
