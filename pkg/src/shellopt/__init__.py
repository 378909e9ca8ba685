"""Isogeometric shape optimization of multi-patch Kirchhoff-Love shells."""
