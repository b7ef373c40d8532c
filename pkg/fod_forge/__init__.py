"""CT-based generation of annotated training data for X-ray foreign-object detection."""

__version__ = "0.1.0"
