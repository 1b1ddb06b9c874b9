"""Multimodal fully convolutional networks for dense labeling of aerial tiles.

Pure numpy engine: layers with explicit backward passes, SegNet-style
encoder/decoder models with early and late fusion, and the tile pipeline
(rasters, sliding windows, stitching, evaluation).
"""

__version__ = "0.1.0"
