"""Adversarial gap analysis for ML-driven VM allocation.

Finds prediction/label scenarios on which a best-fit allocator that trusts its models does much worse
than the same allocator fed ground truth, then traces those scenarios back to feature regions.
"""

__version__ = "0.1.0"
