"""Built-in benchmark configurations."""

from __future__ import annotations

from .config import ExperimentConfig
from .errors import NotFound

_CATALOG = {
    "constant": {
        "description": "Constant map to the north pole; every defect is exactly zero.",
        "config": {
            "manifold": "sphere3",
            "generator": "zero",
            "initial_map": "constant",
            "m": 1,
            "n_nodes": 64,
            "T": 0.1,
            "eps_ladder": [1e-3],
            "n_paths": 200,
            "seed": 7,
            "checkpoints": [0.05, 0.1],
        },
    },
    "great_circle_k1": {
        "description": "Stationary harmonic great circle on S^2; the canonical benchmark.",
        "config": {
            "manifold": "sphere3",
            "generator": "zero",
            "initial_map": "great_circle",
            "initial_params": {"k": 1},
            "m": 1,
            "n_nodes": 128,
            "T": 0.25,
            "eps_ladder": [1e-2, 1e-3, 1e-4],
            "n_paths": 2000,
            "seed": 11,
            "checkpoints": [0.05, 0.1, 0.25],
        },
    },
    "great_circle_k2": {
        "description": "Doubled-speed great circle; gradient-bound and energy checks at 16 pi^2.",
        "config": {
            "manifold": "sphere3",
            "generator": "zero",
            "initial_map": "great_circle",
            "initial_params": {"k": 2},
            "m": 1,
            "n_nodes": 128,
            "T": 0.125,
            "eps_ladder": [1e-3, 3e-4],
            "n_paths": 1000,
            "seed": 13,
            "checkpoints": [0.025, 0.125],
        },
    },
    "torus2_to_sphere_degenerate": {
        "description": "m=2 wrap of the torus onto S^2 with collapsing fibers; feeds the singular-set scan.",
        "config": {
            "manifold": "sphere3",
            "generator": "zero",
            "initial_map": "sphere_wrap",
            "m": 2,
            "n_nodes": 32,
            "T": 0.0625,
            "eps_ladder": [3e-3, 1e-3],
            "n_paths": 200,
            "seed": 5,
            "checkpoints": [0.03125, 0.0625],
        },
    },
}


def list_benchmarks():
    """Name -> one-line description for every built-in config."""
    return {name: entry["description"] for name, entry in _CATALOG.items()}


def get_benchmark(name: str) -> ExperimentConfig:
    if name not in _CATALOG:
        raise NotFound(f"unknown benchmark {name!r}; known: {sorted(_CATALOG)}")
    return ExperimentConfig.from_dict(_CATALOG[name]["config"])
