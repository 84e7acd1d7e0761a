"""Implicit neural representation of near-periodic patterns.

A coordinate MLP whose inputs are warped by the detected lattice periodicity,
trained on the known pixels of a single image, completes the unknown region
and supports segmentation, classification, remapping and refinement.
"""

__version__ = "0.1.0"
