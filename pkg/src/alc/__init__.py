"""Label refinement and selection for Mean Teacher segmentation under noisy labels."""

__version__ = "0.1.0"
