"""Two-stage regularized structured layer pruning on a small numpy transformer."""

__version__ = "0.1.0"
