"""Length-conditioned region captioning on synthetic shape worlds."""

__version__ = "0.1.0"
