"""Two-directional learned learning rates for online recommender updates."""

__version__ = "0.1.0"
