"""Experiment configuration: a flat dataclass that round-trips through JSON."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .. import rmt
from ..prior import Prior
from ..solver import SolverOptions

# Open sweep grid; only the values are chosen here, nothing is tuned to them.
DEFAULT_SWEEP = {"xi": (1.0, 10.0, 100.0), "alpha": (0.25, 0.5), "rho": (0.1, 0.3)}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    ensemble: str = "iid_gaussian"
    alpha: float = 0.5
    xi: float = 100.0
    prior: str = "bernoulli_gaussian"
    rho: float = 0.1
    k: int = 4000
    trials: int = 1
    seed: int = 0
    path: str = "specialized"
    max_iters: int = 50
    tol: float = 1e-10
    chi_mode: str = "empirical"
    v_schedule: str = "tap"
    damping: float = 0.0
    truncation: int = rmt.DEFAULT_TRUNCATION
    check_iters: list = field(default_factory=lambda: [1, 5])
    record_tap: bool = True
    output_dir: str = "runs/default"
    formats: list = field(default_factory=lambda: ["csv", "report"])

    def __post_init__(self):
        if self.k < 16:
            raise ConfigError("k must be >= 16")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.n_rows < 1:
            raise ConfigError("round(alpha * k) must be >= 1")
        unknown = set(self.formats) - {"csv", "report"}
        if unknown:
            raise ConfigError(f"unknown output formats {sorted(unknown)}")
        try:
            self.ensemble_spec()
            self.prior_spec()
            self.solver_options()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def n_rows(self) -> int:
        return round(self.alpha * self.k)

    def ensemble_spec(self) -> rmt.EnsembleSpec:
        return rmt.EnsembleSpec(rmt.EnsembleKind(self.ensemble), self.alpha, self.xi,
                                truncation=self.truncation)

    def prior_spec(self) -> Prior:
        return Prior.from_dict({"kind": self.prior, "rho": self.rho, "variance": 1.0})

    def solver_options(self, **overrides) -> SolverOptions:
        kw = dict(path=self.path, max_iters=self.max_iters, tol=self.tol,
                  chi_mode=self.chi_mode, v_schedule=self.v_schedule, damping=self.damping,
                  record_tap=self.record_tap)
        kw.update(overrides)
        return SolverOptions(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if not math.isfinite(d["tol"]):
            d["tol"] = str(d["tol"])
        return d

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.field_names())
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("tol"), str):
            d["tol"] = float(d["tol"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))
