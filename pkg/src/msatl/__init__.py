"""Multi-source adversarial transfer learning for segmentation with locally similar sources."""

__version__ = "0.1.0"
