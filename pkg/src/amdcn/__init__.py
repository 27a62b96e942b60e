"""Aggregated multicolumn dilated convolution network for density-map counting."""

__version__ = "0.1.0"
