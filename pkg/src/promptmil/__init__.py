"""Few-shot multi-instance prompt learning over precomputed embeddings."""

__version__ = "0.1.0"
