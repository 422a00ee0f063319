"""Directional feature maps for 2D cardiac MRI segmentation."""

__version__ = "0.1.0"

# ACDC label convention; synthetic phantoms follow the same ids.
STRUCTURES = {1: "RV", 2: "MYO", 3: "LV"}
REPORT_ORDER = ("LV", "RV", "MYO")
