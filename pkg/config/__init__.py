"""Perfiles de experimentos (``experiments.yaml``)."""
