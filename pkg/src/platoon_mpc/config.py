"""TOML scenario/batch configuration.

Schema (every table optional; unknown keys are an error)::

    [scenario]  name, controller, route, masses_t, dt_ctrl, plant_substeps,
                t_max, disengage_gap, v0, initial_gaps, drop_prob, seed,
                preview_margin, message_log, schedule_margin
    [truck]     any TruckParams field except m (scalars or lists)
    [fuel]      FuelParams fields
    [ocp]       OcpConfig fields
    [cacc]      CaccGains fields
    [solver]    SolveOptions fields
    [batch]     mass_set_t, platoon_size, controllers, route, dt_ctrl, batch_id

``route`` is ``"s-road"``, ``"rolling-70km"`` or a path to a ``s_m,grade_rad`` CSV
(relative paths resolve against the config file's directory).
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .nlp import SolveOptions
from .ocp import OcpConfig
from .platoon import CaccGains, ControllerKind
from .powertrain import FuelParams, TruckParams
from .road import GradeProfile, RouteParseError, data_path, load_route, make_s_road

ROUTES = ("s-road", "rolling-70km")
DEFAULT_CONFIG = data_path("default.toml")


class ConfigError(ValueError):
    pass


def load_profile(route: str, base_dir: Optional[Path] = None) -> GradeProfile:
    if route == "s-road":
        return make_s_road()
    if route == "rolling-70km":
        return load_route(data_path("rolling_70km.csv"))
    path = Path(route)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    try:
        return load_route(path)
    except (OSError, RouteParseError) as exc:
        raise ConfigError(f"cannot load route {route!r}: {exc}") from None


def _build(cls, table: dict, where: str, skip=()):
    names = {f.name for f in fields(cls)} - set(skip)
    unknown = set(table) - names
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(sorted(unknown))}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in table.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


@dataclass
class RunConfig:
    """Everything a scenario or batch needs, parsed and validated."""

    name: str = "scenario"
    controller: ControllerKind = ControllerKind.CONSIDERATE
    route: str = "s-road"
    masses_t: tuple[float, ...] = (14.0, 38.0, 38.0)
    dt_ctrl: float = 0.5
    plant_substeps: int = 10
    t_max: Optional[float] = None
    disengage_gap: float = 110.0
    v0: Optional[float] = None
    initial_gaps: Optional[tuple[float, ...]] = None
    drop_prob: float = 0.0
    seed: int = 0
    preview_margin: float = 200.0
    message_log: Optional[str] = None
    schedule_margin: float = 0.1
    truck: TruckParams = field(default_factory=TruckParams)
    ocp: OcpConfig = field(default_factory=OcpConfig)
    cacc: CaccGains = field(default_factory=CaccGains)
    solver: SolveOptions = field(default_factory=SolveOptions)
    batch: dict[str, Any] = field(default_factory=dict)
    base_dir: Optional[Path] = None

    def profile(self, route: Optional[str] = None) -> GradeProfile:
        return load_profile(route or self.route, self.base_dir)

    def scenario(self, masses_t=None, controller=None, route=None, dt_ctrl=None, seed=None):
        from .sim import ScenarioConfig
        masses = self.masses_t if masses_t is None else masses_t
        try:
            return ScenarioConfig(
                trucks=[self.truck.with_mass(1000.0 * m) for m in masses],
                profile=self.profile(route),
                controller=ControllerKind(controller or self.controller),
                ocp=self.ocp,
                dt_ctrl=self.dt_ctrl if dt_ctrl is None else dt_ctrl,
                plant_substeps=self.plant_substeps,
                t_max=self.t_max,
                disengage_gap=self.disengage_gap,
                initial_gaps=self.initial_gaps,
                v0=self.v0,
                cacc=self.cacc,
                drop_prob=self.drop_prob,
                seed=self.seed if seed is None else seed,
                preview_margin=self.preview_margin,
                solver=self.solver,
                message_log=self.message_log,
                name=self.name,
                schedule_margin=self.schedule_margin,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


_SCENARIO_KEYS = {f.name for f in fields(RunConfig)} - {"truck", "ocp", "cacc", "solver", "batch", "base_dir"}
_BATCH_KEYS = {"mass_set_t", "platoon_size", "controllers", "route", "dt_ctrl", "batch_id"}


def parse_config(data: dict, base_dir: Optional[Path] = None) -> RunConfig:
    unknown = set(data) - {"scenario", "truck", "fuel", "ocp", "cacc", "solver", "batch"}
    if unknown:
        raise ConfigError(f"unknown tables: {', '.join(sorted(unknown))}")
    sc = dict(data.get("scenario", {}))
    bad = set(sc) - _SCENARIO_KEYS
    if bad:
        raise ConfigError(f"[scenario] unknown keys: {', '.join(sorted(bad))}")
    for key in ("masses_t", "initial_gaps"):
        if key in sc:
            sc[key] = tuple(float(v) for v in sc[key])
    if "controller" in sc:
        try:
            sc["controller"] = ControllerKind(sc["controller"])
        except ValueError:
            raise ConfigError(f"unknown controller {sc['controller']!r}") from None
    fuel = _build(FuelParams, data.get("fuel", {}), "fuel")
    truck_tab = dict(data.get("truck", {}))
    truck = _build(TruckParams, {**truck_tab, "fuel": fuel}, "truck", skip=("m",))
    batch = dict(data.get("batch", {}))
    if set(batch) - _BATCH_KEYS:
        raise ConfigError(f"[batch] unknown keys: {', '.join(sorted(set(batch) - _BATCH_KEYS))}")
    cfg = RunConfig(**sc,
                    truck=truck,
                    ocp=_build(OcpConfig, data.get("ocp", {}), "ocp"),
                    cacc=_build(CaccGains, data.get("cacc", {}), "cacc"),
                    solver=_build(SolveOptions, data.get("solver", {}), "solver"),
                    batch=batch, base_dir=base_dir)
    if cfg.route not in ROUTES:
        cfg.profile()  # fail early on a bad route file
    return cfg


def load_config(path=None) -> RunConfig:
    path = Path(path) if path is not None else DEFAULT_CONFIG
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, path.parent)


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
