"""JSON configuration schema for scenarios and solver settings.

Angles are given in degrees at the file boundary and converted to radians
internally; matrices are row-major nested arrays.  Validation errors name
the offending field with its dotted path.
"""

from __future__ import annotations

import json

import numpy as np

from .dynamics import CWModel, DoubleIntegratorModel, StaticModel, TimeGrid
from .scp import ScalingMaps, SCPSettings, ScenarioConfig
from .uncertainty import UncertaintyConfig


class ConfigError(ValueError):
    """Configuration problem; the message names the offending field."""


def _get(d: dict, key: str, path: str, required: bool = True, default=None):
    if key not in d:
        if required:
            raise ConfigError(f"{path}{key}: missing required field")
        return default
    return d[key]


def _build(path: str, ctor, /, *args, **kwargs):
    try:
        return ctor(*args, **kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _model_from_dict(d: dict, path: str):
    kind = _get(d, "kind", path)
    if kind == "cw":
        return _build(path, CWModel, n=_get(d, "mean_motion", path))
    if kind == "double_integrator":
        return _build(path, DoubleIntegratorModel)
    if kind == "static":
        return _build(path, StaticModel)
    raise ConfigError(f"{path}kind: unknown model kind {kind!r}")


def scenario_from_dict(d: dict) -> ScenarioConfig:
    g = _get(d, "grid", "")
    grid = _build("grid", TimeGrid,
                  nodes=_get(g, "nodes", "grid."),
                  n2=_get(g, "n2", "grid."), n3=_get(g, "n3", "grid."),
                  t_safe=_get(g, "t_safe", "grid."))
    model = _model_from_dict(_get(d, "model", ""), "model.")
    ctrl = _get(d, "control", "")
    cone = _get(d, "cone", "")
    bounds = _get(d, "node_bounds", "")
    unc = _get(d, "uncertainty", "")
    ucfg = _build("uncertainty", UncertaintyConfig,
                  sigma_i=_get(unc, "sigma_i", "uncertainty."),
                  sigma_act=_get(unc, "sigma_act", "uncertainty."),
                  sigma_rr_decision=_get(unc, "sigma_rr_decision",
                                         "uncertainty."),
                  beta_ps=_get(unc, "beta_ps", "uncertainty.",
                               required=False, default=0.8),
                  beta_ac=_get(unc, "beta_ac", "uncertainty.",
                               required=False, default=0.8),
                  beta_act=_get(unc, "beta_act", "uncertainty.",
                                required=False, default=0.8))
    kwargs = dict(
        grid=grid, model=model,
        control_kind=_get(ctrl, "kind", "control."),
        t_burn_phases=_get(ctrl, "t_burn_phases", "control.",
                           required=False),
        avoid_half_edges=_get(d, "avoid_half_edges", ""),
        cone_axis=_get(cone, "axis", "cone."),
        cone_half_angle=np.deg2rad(
            float(_get(cone, "half_angle_deg", "cone."))),
        a2_minus=_get(bounds, "a2_minus", "node_bounds."),
        a2_plus=_get(bounds, "a2_plus", "node_bounds."),
        a3_minus=_get(bounds, "a3_minus", "node_bounds."),
        a3_plus=_get(bounds, "a3_plus", "node_bounds."),
        u_max=_get(d, "u_max", ""),
        x_init=_get(d, "x_init", ""), x_final=_get(d, "x_final", ""),
        uncertainty=ucfg)
    r_lvlh = _get(d, "r_lvlh", "", required=False)
    if r_lvlh is not None:
        kwargs["r_lvlh"] = r_lvlh
    return _build("scenario", ScenarioConfig, **kwargs)


_SETTINGS_FIELDS = ("w_ep", "w_px", "eps_relax", "eps_ep", "eps_px",
                    "max_iters", "q_quad", "m_tau", "integration_steps",
                    "drift_steps_per_sample", "solver_tol",
                    "solver_max_iters")


def settings_from_dict(d: dict) -> SCPSettings:
    kwargs = {}
    for key in _SETTINGS_FIELDS:
        if key in d:
            kwargs[key] = d[key]
    unknown = set(d) - set(_SETTINGS_FIELDS) - {"scaling"}
    if unknown:
        raise ConfigError(f"settings: unknown fields {sorted(unknown)}")
    if "scaling" in d:
        s = d["scaling"]
        kwargs["scaling"] = _build(
            "scaling", ScalingMaps,
            x_scale=_get(s, "x_scale", "scaling.", required=False,
                         default=np.ones(6)),
            u_scale=_get(s, "u_scale", "scaling.", required=False,
                         default=1.0))
    return _build("settings", SCPSettings, **kwargs)


def _load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def load_scenario(path) -> ScenarioConfig:
    return scenario_from_dict(_load_json(path))


def load_settings(path) -> SCPSettings:
    return settings_from_dict(_load_json(path))
