"""Fairness-regularized classifiers: mixup path penalties, gap penalties and
their closed-form analysis on linear-in-features models."""

__version__ = "0.1.0"
