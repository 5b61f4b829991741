"""Decentralized object-center estimation with neural cellular automata on a sensor grid."""

__version__ = "0.1.0"
