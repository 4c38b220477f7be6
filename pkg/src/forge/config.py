"""Experiment config: a TOML file validated by pydantic models.

Unknown keys anywhere are rejected, and the error names the dotted key.
See configs/SCHEMA.md for the annotated layout.
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA = 1
EXPERIMENTS = ("ansatz-verify", "solve", "pullback", "cone-test", "taylor-sample")


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    N: int = 1
    p: float = 3.0
    k: Optional[int] = None
    R: float = 2.0

    @field_validator("N")
    @classmethod
    def _dim(cls, v):
        if not 1 <= v <= 4:
            raise ValueError(f"dim outside 1..4 (got {v})")
        return v


class SurfaceSection(_Strict):
    kind: Literal["zero", "linear", "quadratic", "tabulated"] = "zero"
    ell: float = 0.0
    a: float = 0.0
    axis_only: bool = False
    file: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if not 0 <= self.ell < 1:
            raise ValueError("surface.ell must lie in [0, 1)")
        if self.kind == "tabulated" and not self.file:
            raise ValueError("tabulated surface needs surface.file")
        return self


class GridSection(_Strict):
    h: float = Field(0.0025, gt=0)
    L: Optional[float] = None
    s_min: float = Field(1e-4, gt=0)
    s_max: float = 1.0
    per_decade: float = Field(64, gt=0)


class SolverSection(_Strict):
    n: List[int] = [100, 200]
    delta0: float = Field(0.05, gt=0)
    cfl: float = Field(0.25, gt=0, le=0.5)
    omega: float = Field(0.1, gt=0)
    boundary_tol: float = 1e-6
    n_pullback: int = 1000
    truncation_check: bool = True


class PullbackSection(_Strict):
    x0: List[float] = [0.0]
    sigma: List[float] = [0.5, 0.9]
    delta0: float = Field(0.12, gt=0)       # region T; tau0 = sqrt((1-l)/(1+l)) delta0 / 6
    floor_factor: float = Field(1.05, ge=1)  # concentration stops at floor_factor * S_n
    decades: int = Field(1, ge=1)
    refine: bool = True


class ConeSection(_Strict):
    h: List[float] = [0.01, 0.005]
    R_cone: float = 1.0
    tau: float = 0.5
    L: float = 3.0
    power: int = 6


class TaylorSection(_Strict):
    trials: int = Field(100000, ge=1000)
    u_min: float = Field(0.1, gt=0)
    u_max: float = 10.0
    v_min: float = Field(1e-3, gt=0)
    v_max: float = 10.0


class ExperimentConfig(_Strict):
    schema_version: int = SCHEMA
    name: str = "run"
    seed: int = 0
    workers: int = Field(1, ge=1)
    out: str = "runs/out"
    experiments: List[Literal["ansatz-verify", "solve", "pullback", "cone-test",
                              "taylor-sample"]] = list(EXPERIMENTS)
    model: ModelSection = ModelSection()
    surface: SurfaceSection = SurfaceSection()
    grid: GridSection = GridSection()
    solver: SolverSection = SolverSection()
    pullback: PullbackSection = PullbackSection()
    cone: ConeSection = ConeSection()
    taylor: TaylorSection = TaylorSection()

    @field_validator("schema_version")
    @classmethod
    def _schema(cls, v):
        if v != SCHEMA:
            raise ValueError(f"unsupported schema_version {v}")
        return v

    def digest(self, *sections) -> str:
        """Stable hash of the chosen sections (all when none given)."""
        d = self.model_dump(mode="json")
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _describe(err: ValidationError) -> str:
    msgs = []
    for e in err.errors():
        key = ".".join(str(x) for x in e["loc"])
        if e["type"] == "extra_forbidden":
            msgs.append(f"unknown key '{key}'")
        else:
            msg = e["msg"].removeprefix("Value error, ")
            msgs.append(f"{key}: {msg}" if key else msg)
    return "; ".join(msgs)


def from_dict(d: dict, base: Optional[Path] = None) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(d)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None
    if cfg.surface.file and base is not None and not Path(cfg.surface.file).is_absolute():
        surf = cfg.surface.model_copy(update={"file": str(base / cfg.surface.file)})
        cfg = cfg.model_copy(update={"surface": surf})
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(d, path.parent)


# ------------------------------------------------------------- surfaces

def read_surface_csv(path):
    """Columns x, phi, dphi (header row required). Returns (x, phi, dphi)."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    names = data.dtype.names
    if names is None or len(names) < 2:
        raise ConfigError(f"{path}: expected columns x, phi[, dphi]")
    x = np.asarray(data[names[0]], float)
    phi = np.asarray(data[names[1]], float)
    dphi = np.asarray(data[names[2]], float) if len(names) > 2 else None
    if np.any(np.diff(x) <= 0):
        raise ConfigError(f"{path}: x must be strictly increasing")
    return x, phi, dphi


def surface_spec(cfg: ExperimentConfig) -> dict:
    return cfg.surface.model_dump(mode="json")


def surface_from_spec(dim: int, spec: dict):
    from .geometry import Hypersurface

    kind = spec.get("kind", "zero")
    if kind == "zero":
        return Hypersurface.zero(dim)
    if kind == "linear":
        return Hypersurface.linear(dim, spec["ell"])
    if kind == "quadratic":
        return Hypersurface.quadratic(dim, spec["a"], spec.get("ell", 0.0),
                                      spec.get("axis_only", False))
    if kind == "tabulated":
        if dim != 1:
            raise ConfigError("tabulated surfaces are one-dimensional")
        x, phi, _ = read_surface_csv(spec["file"])
        return Hypersurface.tabulated(x, phi)
    raise ConfigError(f"unknown surface kind {kind}")
