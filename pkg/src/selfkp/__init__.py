"""Self-supervised keypoint/descriptor/semantic feature learning toolkit."""

__version__ = "0.1.0"
