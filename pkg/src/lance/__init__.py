"""lance: a self-evolving post-training data engine with a toy trainer."""

__version__ = "0.1.0"
