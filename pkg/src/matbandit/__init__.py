"""Online low-rank matrix-completion bandits.

Simulation library and CLI for completion-driven recommendation policies:
round-based matrix estimation from bandit feedback, explore-then-commit,
two-cluster phased elimination, a per-user UCB baseline, and a deterministic
regret-accounting harness.
"""
from . import cli, env, harness, matcomp, policies, streams

__all__ = ["cli", "env", "harness", "matcomp", "policies", "streams"]
__version__ = "0.1.0"
