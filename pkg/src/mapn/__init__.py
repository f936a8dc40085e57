"""MAPN: meta-path aggregation with selective state-space filtering."""

__version__ = "0.1.0"
