"""Langevin samplers built on the Euler-Maruyama kernel and its harmonic glue form."""

__version__ = "0.1.0"
