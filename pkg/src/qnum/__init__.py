"""Distributed rate and fidelity allocation for entanglement-distribution networks."""

__version__ = "0.1.0"
