"""Adversarial Markov Game arena.

Decision-based black-box attacks (HopSkipJump-style and boundary-walk),
stateful misdirection defenses, and policy-gradient adaptive control for
both sides, with a scenario harness and metrics.
"""

__version__ = "0.1.0"
