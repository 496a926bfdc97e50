"""Implicit neural signal processing: fit sinusoidal coordinate
networks to discrete signals, differentiate them analytically to any
supported order, and run derivative-stack operators on them without
decoding to a grid."""

__version__ = "0.1.0"
