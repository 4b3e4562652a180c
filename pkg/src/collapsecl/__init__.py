"""collapsecl: continual contrastive learning with fixed simplex-ETF prototypes."""

__version__ = "0.1.0"
