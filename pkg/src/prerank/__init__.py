"""Search pre-ranking with a two-tower model fused with item-query engagement priors."""

__version__ = "0.1.0"
