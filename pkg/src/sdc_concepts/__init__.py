"""Shared decodable concept discovery.

Contrastive brain-to-embedding decoding, sparse interpretable projections of
embedding space, per-participant LASSO concept masks and their
cross-participant consistency.
"""
__version__ = "0.1.0"

from .errors import SDCError  # noqa: F401
from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
