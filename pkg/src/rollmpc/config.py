"""Config loading: a nested YAML file drives every tunable.

``load_config()`` returns the packaged defaults; a user file is deep-merged
over them, so partial overrides stay small.
"""

import importlib.resources
from dataclasses import dataclass

import numpy as np
import yaml

from .gait import GaitConfig
from .model import RobotModel, Terrain
from .ocp import SwingProfile
from .solver import SolverSettings


class ConfigError(ValueError):
    """Malformed or unreadable configuration."""


def _deep_merge(base, override):
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path=None):
    """Parsed config mapping: packaged defaults, optionally overridden."""
    ref = importlib.resources.files("rollmpc").joinpath("data/default.yaml")
    data = yaml.safe_load(ref.read_text())
    if path is not None:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config file: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a mapping")
        data = _deep_merge(data, user)
    return data


@dataclass
class Stack:
    """Everything assembled from one config mapping."""

    model: RobotModel
    terrain: Terrain
    gait: GaitConfig
    swing: SwingProfile
    solver: SolverSettings
    cost_weights: dict
    horizon: float
    mpc_period: float
    solver_dt: float
    plant_step: float
    raw: dict


def build_stack(config):
    """Typed objects from the parsed mapping; raises ConfigError on junk."""
    try:
        model = RobotModel.from_config(config.get("robot"))
        terr = dict(config.get("terrain") or {})
        terrain = Terrain(normal=np.asarray(terr.get("normal", [0, 0, 1.0]),
                                            dtype=float),
                          mu=float(terr.get("mu", 0.7)),
                          offset=float(terr.get("offset", 0.0)))
        gait = GaitConfig.from_config(config.get("gait"))
        swing = SwingProfile(apex_height=float(
            (config.get("swing") or {}).get("apex_height", 0.09)))
        solver = SolverSettings.from_config(config.get("solver"))
        mpc = config.get("mpc") or {}
        simcfg = config.get("sim") or {}
        return Stack(model=model, terrain=terrain, gait=gait, swing=swing,
                     solver=solver,
                     cost_weights=dict(config.get("cost") or {}),
                     horizon=float(mpc.get("horizon", 0.8)),
                     mpc_period=float(mpc.get("period", 0.03)),
                     solver_dt=float(mpc.get("solver_dt", 0.015)),
                     plant_step=float(simcfg.get("plant_step", 0.0025)),
                     raw=config)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
