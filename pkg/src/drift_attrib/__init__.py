"""Ocean-current transport scoring, exposure attribution, and FE estimation."""

__version__ = "0.1.0"
