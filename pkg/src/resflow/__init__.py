"""Multi-task ranking with inter-task residual links."""

__version__ = "0.1.0"
