"""Test-time adaptation of batch-norm classifiers via feature-statistic alignment."""

__version__ = "0.1.0"
