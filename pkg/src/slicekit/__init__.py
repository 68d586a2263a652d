"""Secure network slicing toolkit for power-distribution communication networks.

Builds authentication and per-service slices as exact optimization problems,
drives them from admission/failure events, scores single-failure robustness,
and plans minimum-cost capacity upgrades.
"""

__version__ = "0.1.0"
