"""Joint optical flow / stereo consistency engine on synthetic stereo video."""

__version__ = "0.1.0"
