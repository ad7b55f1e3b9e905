"""Near-future player performance prediction from multimodal sensor streams."""

__version__ = "0.1.0"
