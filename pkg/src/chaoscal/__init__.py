"""Parameter estimation for chaotic systems via contrastive embeddings and ensemble Kalman inversion."""

__version__ = "0.1.0"
