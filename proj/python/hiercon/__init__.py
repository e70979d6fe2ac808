"""Hierarchy-preserving contrastive embeddings with kNN evaluation."""

from hiercon._core import *  # noqa: F401,F403
from hiercon._core import __doc__  # noqa: F401
