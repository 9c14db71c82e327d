"""forgeline: a desk-scale post-training recipe toolkit."""

__version__ = "0.1.0"
