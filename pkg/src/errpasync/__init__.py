"""Asynchronous error-related potential detection with a generic classifier.

Streaming band-pass filtering, a PCA and shrinkage-LDA window classifier,
a two-consecutive-window detector with personalised thresholds, a
closed-loop synthetic experiment and trial-based evaluation.
"""

__version__ = "0.1.0"
