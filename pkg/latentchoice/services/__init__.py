"""Computation engines backed by torch."""
