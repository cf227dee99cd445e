"""Contextualized policy recovery: recurrent encoders that emit per-step logistic policies."""

__version__ = "0.1.0"
