"""Desk-scale offline multi-agent reinforcement learning laboratory."""

__version__ = "0.1.0"
