"""Federated invariant-feature learning workbench for cross-domain fault diagnosis."""

__version__ = "0.1.0"
