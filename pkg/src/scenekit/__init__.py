"""Acoustic scene classification toolkit.

Bag-of-frames feature extraction, per-class generative models, decision
criteria and a cross-validated evaluation harness with sign-test ranking
and disagreement-space MDS.
"""

__version__ = "0.1.0"


class ScenekitError(Exception):
    """Base class for input errors raised by the toolkit."""


class DatasetError(ScenekitError):
    pass


class FeatureError(ScenekitError):
    pass


class ModelError(ScenekitError):
    pass


class CoverageError(ScenekitError):
    """Two decision sets do not cover the same clips."""

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = tuple(missing)
