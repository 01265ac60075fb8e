"""Flexible active safety motion control for serial manipulators.

Kinematic-level MPC with CBF-guided safety constraints whose decay rates are
optimized online, plus a GPIO obstacle observer and a closed-loop harness.
"""

__version__ = "0.1.0"
