"""One-shot federated prompt learning with non-interfering attention masks."""

__version__ = "0.1.0"
