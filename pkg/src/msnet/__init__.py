"""Multi-scale subtraction segmentation network in plain numpy.

Subpackages of note: ``autodiff`` (reverse-mode tensors), ``model``,
``losses``, ``metrics``, ``data`` (synthetic polyp-like scenes) and ``cli``.
"""
__version__ = "0.1.0"
