"""Box-prompted slice segmentation with a learned localizer and 3D voting fusion."""

__version__ = "0.1.0"
