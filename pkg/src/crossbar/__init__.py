"""Crossbar-patch CNN segmentation: orthogonal non-square patch sampling, two
cross-trained sub-networks, cascaded boosting rounds and weighted voting."""
__version__ = "0.1.0"

from ._kernels import BACKEND  # noqa: E402,F401
