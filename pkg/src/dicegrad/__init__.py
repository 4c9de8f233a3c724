"""Differentiable 2D segmentation engine with batch-pooled Dice losses.

Everything runs on CPU in double precision with hand-derived backward
passes; no autodiff framework is involved.
"""

__version__ = "0.1.0"
