"""Multi-task semi-supervised analysis of multimodal 3D volumes."""

__version__ = "0.1.0"
