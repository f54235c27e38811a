"""Deterministic federated-learning simulator with robust aggregation rules and an adaptive backdoor attacker."""

__version__ = "0.1.0"
