"""
Distancias entre curvas, ficheros CSV e informes de experimentos.
"""

import json
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np

from models.errors import GridMismatchError
from utils.csv_io import read_csv

GRID_TOLERANCE = 1e-12


def gaps(a, b) -> Dict[str, float]:
    """
    Distancias L2 (media cuadrática) y sup entre dos arrays de igual forma.

    Raises:
        GridMismatchError: Si las formas no coinciden
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise GridMismatchError(f"formas distintas: {a.shape} vs {b.shape}")
    if a.size == 0:
        return {"l2": 0.0, "sup": 0.0}
    # un NaN en la misma posición de ambos lados cuenta como igual
    diff = np.where(np.isnan(a) & np.isnan(b), 0.0, np.abs(a - b))
    return {"l2": float(np.sqrt(np.mean(diff * diff))), "sup": float(np.max(diff))}


def curve_gaps(x_a, y_a, x_b, y_b) -> Dict[str, float]:
    """Distancias entre dos curvas definidas sobre la misma malla."""
    x_a = np.asarray(x_a, dtype=float)
    x_b = np.asarray(x_b, dtype=float)
    if x_a.shape != x_b.shape or np.any(np.abs(x_a - x_b) > GRID_TOLERANCE):
        raise GridMismatchError("las curvas no comparten malla")
    return gaps(y_a, y_b)


def compare_csv(
    path_a: Union[str, Path],
    path_b: Union[str, Path],
    key_columns: Sequence[str] = ("step", "time", "particle", "coordinate", "x", "rho",
                                  "iteration", "bin_left", "bin_right", "seed"),
) -> Dict[str, Dict[str, float]]:
    """
    Compara dos CSV columna a columna.

    Las columnas de malla (``key_columns``) deben coincidir; el resto se
    compara como cantidades.

    Returns:
        {columna: {"l2": ..., "sup": ...}}
    """
    header_a, values_a = read_csv(path_a)
    header_b, values_b = read_csv(path_b)
    if header_a != header_b:
        raise GridMismatchError(f"cabeceras distintas: {header_a} vs {header_b}")
    if values_a.shape != values_b.shape:
        raise GridMismatchError(
            f"número de filas distinto: {values_a.shape[0]} vs {values_b.shape[0]}"
        )
    result = {}
    for i, name in enumerate(header_a):
        column_a, column_b = values_a[:, i], values_b[:, i]
        if name in key_columns:
            same = np.isclose(column_a, column_b, rtol=0.0, atol=GRID_TOLERANCE, equal_nan=True)
            if not np.all(same):
                raise GridMismatchError(f"la columna de malla '{name}' no coincide")
            continue
        if np.all(np.isnan(column_a)) and np.all(np.isnan(column_b)):
            continue
        result[name] = gaps(column_a, column_b)
    return result


def _flatten(prefix: str, value, out: Dict[str, float]) -> None:
    if isinstance(value, dict):
        for key, inner in value.items():
            _flatten(f"{prefix}.{key}" if prefix else str(key), inner, out)
    elif isinstance(value, (int, float)) and not isinstance(value, bool) and value is not None:
        out[prefix] = float(value)


def _metric_table(report: Dict) -> Dict[str, float]:
    table: Dict[str, float] = {}
    for row in report.get("runs", []):
        if row.get("error"):
            continue
        _flatten(f"seed{row['seed']}", row.get("metrics", {}), table)
    _flatten("aggregate", report.get("aggregate", {}), table)
    return table


def compare_reports(report_a: Dict, report_b: Dict) -> Dict[str, float]:
    """
    Diferencia absoluta de cada métrica presente en ambos informes.

    Raises:
        GridMismatchError: Si los informes no tienen métricas en común
    """
    table_a = _metric_table(report_a)
    table_b = _metric_table(report_b)
    shared = sorted(set(table_a) & set(table_b))
    if not shared:
        raise GridMismatchError("los informes no comparten ninguna métrica")
    return {key: abs(table_a[key] - table_b[key]) for key in shared}


def load_report(path: Union[str, Path]) -> Dict:
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)


def compare_paths(path_a: Union[str, Path], path_b: Union[str, Path]) -> Dict:
    """Compara dos informes JSON, dos CSV o dos directorios de salida."""
    path_a, path_b = Path(path_a), Path(path_b)
    if path_a.is_dir() and path_b.is_dir():
        summary: Dict[str, Dict] = {}
        for file_a in sorted(path_a.rglob("*.csv")):
            relative = file_a.relative_to(path_a)
            file_b = path_b / relative
            if not file_b.exists():
                raise GridMismatchError(f"falta {relative} en {path_b}")
            summary[str(relative)] = compare_csv(file_a, file_b)
        return summary
    if path_a.suffix == ".json" and path_b.suffix == ".json":
        return compare_reports(load_report(path_a), load_report(path_b))
    if path_a.suffix == ".csv" and path_b.suffix == ".csv":
        return compare_csv(path_a, path_b)
    raise GridMismatchError(f"no se pueden comparar {path_a.name} y {path_b.name}")


def max_gap(summary: Dict) -> Optional[float]:
    """Mayor distancia sup (o diferencia) de un resumen de compare_paths; NaN si alguna lo es."""
    values = []

    def walk(node):
        if isinstance(node, dict):
            if "sup" in node and isinstance(node["sup"], float):
                values.append(node["sup"])
                return
            for inner in node.values():
                walk(inner)
        elif isinstance(node, float):
            values.append(node)

    walk(summary)
    if not values:
        return None
    if np.any(np.isnan(values)):
        return float("nan")
    return max(values)
