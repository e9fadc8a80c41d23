"""Low-rank CNN compression: SVD building blocks, differentiable search, synthetic-data distillation."""

__version__ = "0.1.0"
