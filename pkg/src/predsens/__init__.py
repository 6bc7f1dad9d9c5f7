"""Accumulated prediction sensitivity: a gradient-based fairness metric for
differentiable classifiers, with the tooling to train, audit, and validate it."""

__version__ = "0.1.0"

from .sensitivity import VARIANTS, VariantSpec, evaluate_variant  # noqa: E402

__all__ = ["VARIANTS", "VariantSpec", "evaluate_variant", "__version__"]
