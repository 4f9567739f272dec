"""Flow-matching gradient-variance and memorization laboratory on Gaussian transport."""

__version__ = "0.1.0"
