"""Semi-supervised segmentation lab: pseudo-label training with fixed or
variationally learned confidence thresholds, a tractable EM testbed, and a
robustness/uncertainty evaluation harness."""

__version__ = "0.1.0"
