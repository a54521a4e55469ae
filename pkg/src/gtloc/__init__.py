"""Weakly supervised object localization toolkit.

A coarse foreground map is learned from image-level labels by a
global-token transformer, a pluggable segmentation backend turns dense
grid-point prompts into per-image mask galleries, and pixel-IoU matching
picks the gallery mask that best agrees with the coarse map.
"""

__version__ = "0.1.0"
