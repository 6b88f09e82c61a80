"""Few-step causal generator distillation on a synthetic sequence world."""

__version__ = "0.1.0"
