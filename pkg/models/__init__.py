"""Núcleo numérico: modelos de campo medio, diferenciación automática, redes, simulación, solvers y oráculos."""

__version__ = "1.0.0"
