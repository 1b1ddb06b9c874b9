"""Raster I/O, patch grids, stitching and the synthetic scene generator."""
