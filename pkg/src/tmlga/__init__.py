"""Proposal-free temporal moment localization with a guided-attention dynamic filter.

Everything runs on a small float64 reverse-mode autodiff core (:mod:`tmlga.diffcore`).
"""
__version__ = "0.1.0"
