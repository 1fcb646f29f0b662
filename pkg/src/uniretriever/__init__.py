"""Multi-objective embedding retrieval with a two-tier graph index."""

__version__ = "0.1.0"
