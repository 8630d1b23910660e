"""Desk-scale lab for language-pivoted multi-modal detection: detection
metrics (mAP / H-mAP), a reverse-mode autodiff tape with emulated reduced
precision, layerwise visual-semantic annealing, synthetic cross-modal
alignment training, optimization diagnostics, and mixture sampling.
"""

__version__ = "0.1.0"
