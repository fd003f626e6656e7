#!/usr/bin/env python3
"""
CLI for the mean field solver toolkit.
Command-line interface separated from core logic.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import yaml

from models.errors import ConfigError, MeanFieldError
from models.experiment import OUTPUT_ROOT_ENV, ExperimentConfig, run_experiment
from models.model import FBSDE_PRESETS, PRESET_DESCRIPTIONS, PRESETS
from utils.compare import compare_paths, max_gap

PROFILES_PATH = Path(__file__).parent / "config" / "experiments.yaml"

LOGGER = logging.getLogger("mfc_solver")


def setup_logging(quiet: bool = False) -> None:
    """Un único StreamHandler con mensajes sin adornos."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.WARNING if quiet else logging.INFO)


def load_profiles(path: Path = PROFILES_PATH) -> dict:
    """Load the experiment profiles from YAML."""
    if not path.exists():
        return {}  # pragma: no cover
    with open(path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f) or {}


def load_profile(profile_name: str, path: Path = PROFILES_PATH) -> Optional[dict]:
    return load_profiles(path).get(profile_name)


def apply_profile(data: dict, profile: dict) -> dict:
    """Fill in profile values the explicit configuration does not set (nested)."""
    merged = dict(data)
    for key, value in profile.items():
        if key not in merged or merged[key] is None:
            merged[key] = value
        elif isinstance(merged[key], dict) and isinstance(value, dict):
            merged[key] = apply_profile(merged[key], value)
    return merged


def build_config(args) -> ExperimentConfig:
    """Configuration from --config and/or --profile (the file wins)."""
    data = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            try:
                data = yaml.safe_load(f) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(None, f"{args.config}: invalid YAML ({exc})") from exc
    if args.profile:
        profile = load_profile(args.profile)
        if profile is None:
            raise ConfigError("profile", f"unknown profile '{args.profile}'")
        LOGGER.info(f"Cargando perfil: {args.profile}")
        data = apply_profile(data, profile)
    if not data:
        raise ConfigError(None, "se necesita --config o --profile")
    return ExperimentConfig.from_dict(data)


def cmd_run(args) -> int:
    try:
        config = build_config(args)
        report = run_experiment(config, out=args.out, seeds=args.seeds, threads=args.threads)
    except (ConfigError, OSError) as e:
        LOGGER.error(f"✗ Error de configuración: {e}")
        return 2
    for name, stats in report.aggregate.items():
        LOGGER.info(f"  {name}: {stats['mean']:.6g} ± {stats['std']:.2g}")
    LOGGER.info(f"Informe: {Path(report.output_dir) / 'report.json'}")
    return 0 if report.success else 1


def cmd_compare(args) -> int:
    try:
        summary = compare_paths(args.first, args.second)
    except (MeanFieldError, OSError, ValueError) as e:
        LOGGER.error(f"✗ No se pueden comparar: {e}")
        return 2
    print(json.dumps(summary, indent=2, sort_keys=True))
    worst = max_gap(summary)
    # un NaN nunca cumple la tolerancia
    if args.tolerance is not None and worst is not None and not worst <= args.tolerance:
        LOGGER.error(f"✗ Diferencia máxima {worst:.6g} > {args.tolerance:.6g}")
        return 1
    if worst is not None:
        LOGGER.info(f"✓ Diferencia máxima {worst:.6g}")
    return 0


def cmd_list_presets(args) -> int:
    for name in PRESETS:
        kind = "fbsde" if name in FBSDE_PRESETS else "mfc"
        print(f"{name:15s} [{kind}] {PRESET_DESCRIPTIONS[name]}")
    profiles = load_profiles()
    if profiles:
        print("\nPerfiles: " + ", ".join(sorted(profiles)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Solvers de control de campo medio y FBSDE de McKean-Vlasov.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"""
Ejemplos de uso:
  # Listar los casos de prueba disponibles
  %(prog)s list-presets

  # Ejecutar un perfil predefinido con tres semillas en paralelo
  %(prog)s run --profile lq --seeds 0 1 2 --threads 3

  # Ejecutar un fichero de configuración propio
  %(prog)s run --config mi_experimento.yaml --out resultados/lq

  # Comparar dos ejecuciones (informes, CSV o directorios)
  %(prog)s compare resultados/a/report.json resultados/b/report.json

Variable de entorno: {OUTPUT_ROOT_ENV} fija el directorio raíz de salida.
        """,
    )
    parser.add_argument("-q", "--quiet", action="store_true", help="Modo silencioso")
    sub = parser.add_subparsers(dest="command")

    run = sub.add_parser("run", help="Ejecutar un experimento")
    run.add_argument("--config", help="Fichero YAML del experimento")
    run.add_argument("--profile", help="Perfil de config/experiments.yaml")
    run.add_argument("--out", help="Directorio de salida")
    run.add_argument(
        "--seeds", type=int, nargs="+", metavar="SEED", help="Semillas (sustituye a las del fichero)"
    )
    run.add_argument("--threads", type=int, default=1, help="Semillas ejecutadas en paralelo")
    run.set_defaults(func=cmd_run)

    compare = sub.add_parser("compare", help="Comparar dos resultados")
    compare.add_argument("first", help="Informe JSON, CSV o directorio")
    compare.add_argument("second", help="Informe JSON, CSV o directorio")
    compare.add_argument(
        "--tolerance", type=float, help="Fallar si la diferencia máxima supera este valor"
    )
    compare.set_defaults(func=cmd_compare)

    presets = sub.add_parser("list-presets", help="Listar casos de prueba y perfiles")
    presets.set_defaults(func=cmd_list_presets)
    return parser


def main(argv: Optional[List[str]] = None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help()
        sys.exit(1)
    setup_logging(args.quiet)
    if getattr(args, "threads", 1) < 1:
        LOGGER.error("✗ --threads debe ser >= 1")
        sys.exit(2)
    sys.exit(args.func(args))


if __name__ == "__main__":
    main()
