"""Utilidades de entrada/salida CSV y comparación de resultados."""
