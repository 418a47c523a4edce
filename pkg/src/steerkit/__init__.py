"""Projected synthetic-gradient descent for discrete-time distribution steering."""

__version__ = "0.1.0"
