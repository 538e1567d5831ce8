"""Bottom-up volumetric segmentation via superpixels, dense patch labeling and
cascaded superpixel classification."""

__version__ = "0.1.0"
