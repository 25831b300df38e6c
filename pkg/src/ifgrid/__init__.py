"""Desk-scale instruction-following agent: gridworld, model, and training harness."""

__version__ = "0.1.0"
