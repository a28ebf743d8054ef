"""Two-tower video recommender with attention-based metadata fusion."""

__version__ = "0.1.0"
