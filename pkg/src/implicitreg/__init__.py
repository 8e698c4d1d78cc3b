"""Two-layer ReLU network experiments on network size, norms and convex neural nets."""

__version__ = "0.1.0"
