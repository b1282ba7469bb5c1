"""Few-shot semantic parsing with a transition-based template generator,
slot filling and prototype-initialized action embeddings."""

__version__ = "0.1.0"
