"""gesturekit: text-to-gesture generation by contrastive retrieval."""

__version__ = "0.1.0"
