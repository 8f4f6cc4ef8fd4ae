"""Experiment configuration: TOML or JSON in, validated dataclass out.

Float-valued fields accept decimal strings as well as numbers, so configs
survive locale-hostile tooling; the canonical form used for hashing renders
floats with repr, which round-trips exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigInvalid
from .generators import GENERATOR_IDS
from .geometry import MANIFOLD_IDS
from .initial_maps import INITIAL_MAP_IDS

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python 3.10
    import tomli as _toml


def _as_float(value, name):
    if isinstance(value, bool):
        raise ConfigInvalid(f"{name} must be a number, got a bool")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigInvalid(f"{name} is not a decimal number: {value!r}") from exc
    raise ConfigInvalid(f"{name} must be a number or decimal string")


def _as_int(value, name):
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise ConfigInvalid(f"{name} must be an integer")
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigInvalid(f"{name} is not an integer: {value!r}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated description of one experiment run.

    ``dt`` and ``path_dt`` may be None ("auto"): the solver step then comes
    from the CFL bound and the Brownian grid from T/2000. ``out`` names the
    output directory and is excluded from the semantic hash.
    """

    manifold: str = "sphere3"
    delta0: Optional[float] = None
    generator: str = "zero"
    generator_param: float = 1.0
    initial_map: str = "great_circle"
    initial_params: dict = field(default_factory=dict)
    m: int = 1
    n_nodes: int = 64
    T: float = 0.25
    dt: Optional[float] = None
    path_dt: Optional[float] = None
    eps_ladder: tuple = (1e-3,)
    n_paths: int = 200
    seed: int = 0
    checkpoints: tuple = ()
    scheme: str = "imex"
    out: Optional[str] = None

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        d = dict(raw)
        for key in ("T", "generator_param"):
            if key in d:
                d[key] = _as_float(d[key], key)
        for key in ("delta0", "dt", "path_dt"):
            if key in d and d[key] is not None:
                d[key] = None if d[key] == "auto" else _as_float(d[key], key)
        for key in ("m", "n_nodes", "n_paths", "seed"):
            if key in d:
                d[key] = _as_int(d[key], key)
        if "eps_ladder" in d:
            d["eps_ladder"] = tuple(
                _as_float(v, "eps_ladder entry") for v in d["eps_ladder"]
            )
        if "checkpoints" in d:
            d["checkpoints"] = tuple(
                _as_float(v, "checkpoint") for v in d["checkpoints"]
            )
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.manifold not in MANIFOLD_IDS:
            raise ConfigInvalid(f"manifold must be one of {MANIFOLD_IDS}")
        if self.generator not in GENERATOR_IDS:
            raise ConfigInvalid(f"generator must be one of {GENERATOR_IDS}")
        if self.initial_map not in INITIAL_MAP_IDS:
            raise ConfigInvalid(f"initial_map must be one of {INITIAL_MAP_IDS}")
        if self.m not in (1, 2):
            raise ConfigInvalid("m must be 1 or 2")
        if self.n_nodes < 8:
            raise ConfigInvalid("n_nodes must be >= 8")
        if self.T <= 0:
            raise ConfigInvalid("T must be positive")
        if self.delta0 is not None and not 0 < self.delta0 < 1.0 / 3.0:
            raise ConfigInvalid("delta0 must lie in (0, 1/3)")
        if not self.eps_ladder or any(e <= 0 for e in self.eps_ladder):
            raise ConfigInvalid("eps_ladder must be a nonempty list of positive reals")
        if list(self.eps_ladder) != sorted(self.eps_ladder, reverse=True):
            raise ConfigInvalid("eps_ladder must be strictly decreasing")
        if self.n_paths < 1:
            raise ConfigInvalid("n_paths must be >= 1")
        if self.scheme not in ("imex", "explicit"):
            raise ConfigInvalid("scheme must be 'imex' or 'explicit'")
        for dt_name in ("dt", "path_dt"):
            dt = getattr(self, dt_name)
            if dt is not None:
                if dt <= 0:
                    raise ConfigInvalid(f"{dt_name} must be positive")
                k = round(self.T / dt)
                if k < 1 or abs(k * dt - self.T) > 1e-12 * max(1.0, self.T):
                    raise ConfigInvalid(f"{dt_name} must divide T within 1e-12")
        pdt = self.resolved_path_dt()
        for c in self.checkpoints:
            if not 0 < c <= self.T + 1e-12:
                raise ConfigInvalid("checkpoints must lie in (0, T]")
            j = round(c / pdt)
            if abs(j * pdt - c) > 1e-9:
                raise ConfigInvalid(
                    f"checkpoint {c} is not a multiple of the path step {pdt!r}"
                )

    def resolved_path_dt(self) -> float:
        return self.path_dt if self.path_dt is not None else self.T / 2000.0

    def canonical_dict(self) -> dict:
        d = {}
        for f in fields(self):
            if f.name == "out":
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    """Read a TOML (or JSON mirror) config file."""
    path = Path(path)
    if path.suffix == ".toml":
        with open(path, "rb") as fh:
            raw = _toml.load(fh)
    elif path.suffix == ".json":
        with open(path) as fh:
            raw = json.load(fh)
    else:
        raise ConfigInvalid(f"config must be .toml or .json, got {path.suffix!r}")
    return ExperimentConfig.from_dict(raw)
