"""Maximum-expected-value estimators and the reinforcement-learning algorithms built on them."""

__version__ = "0.1.0"
