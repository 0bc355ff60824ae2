"""Backbone-independent brain tumor segmentation pipeline engine.

Consumes per-model probability or label volumes plus reference masks and
runs radiomic fold stratification, lesion-wise evaluation, rank scoring,
model fusion and cluster-adaptive post-processing.
"""

__version__ = "0.1.0"
