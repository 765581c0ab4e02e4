"""Learned-model sampling control with an adaptive barrier-function filter."""

__version__ = "0.1.0"
