"""pforge: prefix domain adaptation at desk scale.

A from-scratch encoder transformer whose per-layer key/value prefixes are
pre-trained with masked language modelling on a domain corpus and then
reused to initialize fewshot classification, with full finetuning, full
domain adaptation, and plain prefix tuning as baselines.
"""

__version__ = "0.1.0"


class DataError(Exception):
    """Raised for unreadable, malformed, or inconsistent input data."""


class TrainingError(Exception):
    """Raised when a training run cannot proceed (divergence, bad inputs)."""
