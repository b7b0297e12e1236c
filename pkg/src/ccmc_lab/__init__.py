"""Attention as context-conditioned Markov chains.

Equivalence, learning and collapse of single-layer attention.
"""

try:
    from ._version import __version__
except ImportError:  # pragma: no cover - source tree without VCS metadata
    __version__ = "0.0.0+unknown"

__all__ = ["__version__"]
