"""Scene configuration: a JSON document validated before any stage runs.

Unknown keys are rejected everywhere so typos fail loudly. Every default is
materialized by :func:`load_config`, and reports embed the resolved config.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

Vec3 = tuple[float, float, float]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MeshGeometry(_Strict):
    type: Literal["mesh"]
    path: str


class GridGeometry(_Strict):
    type: Literal["grid"]
    path: str
    iso: Optional[float] = None


class BoxGeometry(_Strict):
    type: Literal["box"]
    lo: Vec3 = (0.0, 0.0, 0.0)
    hi: Vec3 = (1.0, 1.0, 1.0)


class BoxUnionGeometry(_Strict):
    type: Literal["boxes"]
    boxes: list[tuple[float, float, float, float, float, float]] = Field(min_length=1)


Geometry = Annotated[Union[MeshGeometry, GridGeometry, BoxGeometry, BoxUnionGeometry], Field(discriminator="type")]


class Material(_Strict):
    young_modulus: float
    poisson_ratio: float
    on_inverted: Literal["raise", "clamp"] = "raise"


class Sampling(_Strict):
    method: Literal["uniform", "poisson", "random"] = "uniform"
    counts: Optional[tuple[int, int, int]] = None
    radius: Optional[float] = None
    attempts: int = 30
    n: Optional[int] = None
    band: Optional[float] = None
    max_particles: int = 200_000
    free_surface: bool = True

    @model_validator(mode="after")
    def _method_params(self):
        if self.method == "uniform" and self.counts is None:
            raise ValueError("uniform sampling needs 'counts'")
        if self.method == "poisson" and self.radius is None:
            raise ValueError("poisson sampling needs 'radius'")
        if self.method == "random" and self.n is None:
            raise ValueError("random sampling needs 'n'")
        return self


class BoxSelector(_Strict):
    kind: Literal["box"]
    lo: Vec3
    hi: Vec3


class SphereSelector(_Strict):
    kind: Literal["sphere"]
    center: Vec3
    radius: float


class FaceSelector(_Strict):
    kind: Literal["faces"]
    face_ids: list[int] = Field(min_length=1)


Selector = Annotated[Union[BoxSelector, SphereSelector, FaceSelector], Field(discriminator="kind")]


class Region(_Strict):
    name: str
    kind: Literal["dirichlet", "neumann"]
    selector: Selector
    value: Vec3 = (0.0, 0.0, 0.0)

    @field_validator("name")
    @classmethod
    def _reserved(cls, v):
        if v == "free":
            raise ValueError("region name 'free' is reserved for the traction-free surface")
        if not v or any(ch.isspace() for ch in v):
            raise ValueError("region names must be non-empty and contain no whitespace")
        return v


class Optimizer(_Strict):
    epochs: int = Field(2000, ge=1)
    lr: float = Field(1e-3, gt=0)
    lr_final: Optional[float] = Field(None, gt=0)
    tol: float = 1e-6
    window: int = Field(100, ge=1)
    load_steps: int = Field(1, ge=1)
    refine_iters: int = Field(0, ge=0)
    refine_history: int = Field(20, ge=1)


class DemSettings(Optimizer):
    boundary_weight: Optional[float] = Field(None, gt=0)


class PinnSettings(Optimizer):
    residual_weight: float = Field(1.0, gt=0)
    traction_weight: float = Field(1.0, gt=0)
    boundary_weight: float = Field(100.0, gt=0)


class Network(_Strict):
    hidden: list[int] = Field(default_factory=lambda: [64, 64, 64])
    seed: Optional[int] = None


class Solver(_Strict):
    method: Literal["dem", "pinn", "both"] = "dem"
    network: Network = Network()
    dem: DemSettings = DemSettings()
    pinn: PinnSettings = PinnSettings()
    predict_points: int = Field(100_000, ge=1)


class CameraConfig(_Strict):
    kind: Literal["orthographic", "pinhole"] = "orthographic"
    position: Optional[Vec3] = None
    look_at: Optional[Vec3] = None
    up: Vec3 = (0.0, 0.0, 1.0)
    width: int = Field(96, ge=1)
    height: int = Field(96, ge=1)
    near: Optional[float] = None
    far: Optional[float] = None
    extent: Optional[float] = None
    fov: float = 40.0


class Render(_Strict):
    enabled: bool = True
    camera: CameraConfig = CameraConfig()
    steps: int = Field(256, ge=2)
    background: Vec3 = (0.0, 0.0, 0.0)
    color: Vec3 = (1.0, 1.0, 1.0)
    density: float = Field(20.0, gt=0)
    spacing: Optional[float] = Field(None, gt=0)
    padding: float = Field(0.15, ge=0)


class Oracle(_Strict):
    resolution: tuple[int, int, int] = (12, 4, 4)
    load_steps: int = Field(1, ge=1)


class SceneConfig(_Strict):
    seed: int
    geometry: Geometry
    material: Material
    sampling: Sampling
    regions: list[Region] = Field(default_factory=list)
    body_force: Vec3 = (0.0, 0.0, 0.0)
    solver: Solver = Solver()
    render: Render = Render()
    oracle: Oracle = Oracle()
    output_dir: str = "out"

    @model_validator(mode="after")
    def _unique_names(self):
        names = [r.name for r in self.regions]
        if len(set(names)) != len(names):
            raise ValueError("region names must be unique")
        return self


def load_config(path, seed_override=None, out_dir=None) -> SceneConfig:
    """Parse and validate a scene file.

    Relative geometry paths are resolved against the config file's folder.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if seed_override is not None:
        raw["seed"] = int(seed_override)
    if out_dir is not None:
        raw["output_dir"] = str(out_dir)
    geo = raw.get("geometry")
    if isinstance(geo, dict) and "path" in geo and not Path(geo["path"]).is_absolute():
        geo["path"] = str((path.parent / geo["path"]).resolve())
    return parse_config(raw)


def parse_config(raw: dict) -> SceneConfig:
    try:
        return SceneConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid scene config:\n{exc}") from None


def resolved(cfg: SceneConfig) -> dict:
    return json.loads(cfg.model_dump_json())


def json_schema() -> dict:
    return SceneConfig.model_json_schema()
