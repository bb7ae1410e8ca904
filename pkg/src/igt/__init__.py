"""Idea-gated decoding on a frozen toy transformer.

Importing the package itself stays cheap; the submodules pull in numpy.
"""

__version__ = "0.1.0"
