"""Digital-twin channel synthesis and CSI compression lab."""

__version__ = "0.1.0"
