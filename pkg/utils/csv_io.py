"""
Escritura y lectura de los CSV que emiten los experimentos.

Todos los ficheros llevan una fila de cabecera y los reales se escriben con
17 cifras significativas, de modo que dos ejecuciones con las mismas
semillas producen ficheros idénticos byte a byte.
"""

import csv
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

PathLike = Union[str, Path]

TRACE_COLUMNS = ("iteration", "loss", "ma_loss", "eval_loss", "l2_error", "grad_norm")


def format_value(value) -> str:
    """Formatea un valor para CSV (enteros tal cual, reales con 17 cifras)."""
    if value is None:
        return "nan"
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """
    Escribe un CSV con cabecera.

    Args:
        path: Fichero de salida (se crean los directorios intermedios)
        header: Nombres de columna
        rows: Filas; cada una con tantos valores como columnas

    Returns:
        Ruta escrita
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    width = len(header)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            row = list(row)
            if len(row) != width:
                raise ValueError(f"{path}: fila con {len(row)} valores, se esperaban {width}")
            writer.writerow([format_value(v) for v in row])
    return path


def read_csv(path: PathLike) -> Tuple[List[str], np.ndarray]:
    """
    Lee un CSV numérico.

    Returns:
        (cabecera, matriz de valores); las celdas no numéricas se leen como NaN
    """
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: fichero vacío")
        rows = [[_to_float(cell) for cell in row] for row in reader if row]
    values = np.array(rows, dtype=float) if rows else np.zeros((0, len(header)))
    return header, values.reshape(-1, len(header))


def _to_float(cell: str) -> float:
    try:
        return float(cell)
    except ValueError:
        return math.nan


def read_columns(path: PathLike) -> Dict[str, np.ndarray]:
    header, values = read_csv(path)
    return {name: values[:, i] for i, name in enumerate(header)}


def write_trace(path: PathLike, trace) -> Path:
    """Traza de entrenamiento (sin tiempos de reloj, para que sea reproducible)."""
    rows = (
        [getattr(record, column) for column in TRACE_COLUMNS] for record in trace.records
    )
    return write_csv(path, TRACE_COLUMNS, rows)


def write_trajectories(
    path: PathLike,
    times: np.ndarray,
    trajectories: np.ndarray,
    max_particles: Optional[int] = None,
) -> Path:
    """
    Trayectorias en formato largo: (step, time, particle, coordinate, value).

    Args:
        times: Instantes de la malla (N_T + 1)
        trajectories: Array (N_T + 1, N, d)
        max_particles: Limita el volcado a las primeras partículas
    """
    steps, n, dim = trajectories.shape
    n = n if max_particles is None else min(n, max_particles)

    def rows():
        for step in range(steps):
            for particle in range(n):
                for coord in range(dim):
                    yield (step, times[step], particle, coord, trajectories[step, particle, coord])

    return write_csv(path, ("step", "time", "particle", "coordinate", "value"), rows())


def write_paths_xy(
    path: PathLike,
    times: np.ndarray,
    X: np.ndarray,
    Y: np.ndarray,
    max_particles: Optional[int] = None,
) -> Path:
    """Trayectorias (particle, time, X, Y) de una FBSDE escalar."""
    n = X.shape[1] if max_particles is None else min(X.shape[1], max_particles)

    def rows():
        for particle in range(n):
            for step, t in enumerate(times):
                yield (particle, t, X[step, particle, 0], Y[step, particle, 0])

    return write_csv(path, ("particle", "time", "X", "Y"), rows())


def histogram_table(
    samples: Dict[str, np.ndarray], bins: int = 50
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Histogramas con bordes comunes para varias muestras (una por escenario)."""
    pooled = np.concatenate([np.ravel(s) for s in samples.values()])
    edges = np.histogram_bin_edges(pooled, bins=bins)
    counts = {label: np.histogram(np.ravel(s), bins=edges)[0] for label, s in samples.items()}
    return edges, counts


def write_histogram(path: PathLike, edges: np.ndarray, counts: Dict[str, np.ndarray]) -> Path:
    labels = list(counts)
    header = ["bin_left", "bin_right"] + [f"count_{label}" for label in labels]
    rows = (
        [edges[i], edges[i + 1]] + [int(counts[label][i]) for label in labels]
        for i in range(len(edges) - 1)
    )
    return write_csv(path, header, rows)


def write_curve(path: PathLike, points) -> Path:
    """Curva Y0(rho): columnas rho, y0_estimate, eval_loss, seed."""
    rows = ((p.rho, p.y0, p.eval_loss, p.seed) for p in points)
    return write_csv(path, ("rho", "y0_estimate", "eval_loss", "seed"), rows)


def write_y_profiles(
    path: PathLike, profiles: Sequence[Tuple[float, np.ndarray, np.ndarray, np.ndarray]]
) -> Path:
    """Perfiles Y(t, x) del solver frente al oráculo EDP: (time, x, y_solver, y_pde)."""

    def rows():
        for t, x, y_solver, y_pde in profiles:
            order = np.argsort(x, kind="stable")
            for i in order:
                yield (t, x[i], y_solver[i], y_pde[i])

    return write_csv(path, ("time", "x", "y_solver", "y_pde"), rows())


def write_pde_solution(path: PathLike, solution, stride: int = 1) -> Path:
    """Mallas de m y u: columnas (step, time, x, m, u), una fila por celda."""

    def rows():
        for n in range(0, len(solution.times), stride):
            for i, x in enumerate(solution.x):
                yield (n, solution.times[n], x, solution.m[n, i], solution.u[n, i])

    return write_csv(path, ("step", "time", "x", "m", "u"), rows())


def write_riccati(path: PathLike, solution) -> Path:
    """Coeficientes de Riccati en la malla temporal (más la media si existe)."""
    header = ["time", *solution.names]
    columns = [solution.times] + [solution.coefficients[name] for name in solution.names]
    if solution.mean_path is not None:
        header.append("mean")
        columns.append(solution.mean_path)
    return write_csv(path, header, zip(*columns))
