"""Decentralized-learning simulator with dissimilarity-guided dynamic topologies."""

__version__ = "0.1.0"
