"""Geography-aware generative recommendation in plain numpy."""

__version__ = "0.1.0"
