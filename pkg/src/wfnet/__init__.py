"""Weight-Filtering networks for single-round multi-class unlearning."""

__version__ = "0.1.0"
