"""Pedestrian types, attribute sampling and single-agent movement helpers.

The per-agent functions here are thin wrappers over the batched kernels in
:mod:`pedsim.kernels`; the engine calls the kernels directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import WallIndex
from .spatial import build_hash

PERCEPTION_RADIUS = 3.0
HORIZON = 2.0

WALKING, WAITING, QUEUING, DELAYED, EVACUATING = range(5)
ACTIONS = ("walking", "waiting", "queuing", "delayed", "evacuating")


class AgentError(ValueError):
    pass


@dataclass(frozen=True)
class PedestrianType:
    name: str
    speed_mean: float = 1.34
    speed_sd: float = 0.26
    speed_min: float = 0.5
    speed_max: float = 2.2
    radius: float = 0.23
    luggage_factor: float = 1.0
    prm: bool = False
    familiarity: float | None = None

    def __post_init__(self):
        if not (0 < self.speed_min <= self.speed_mean <= self.speed_max):
            raise AgentError(f"type {self.name}: need 0 < min <= mean <= max speed")
        if self.speed_sd < 0:
            raise AgentError(f"type {self.name}: negative speed sd")
        if not self.radius > 0:
            raise AgentError(f"type {self.name}: radius must be positive")
        if not (0 < self.luggage_factor <= 1):
            raise AgentError(f"type {self.name}: luggage factor must lie in (0, 1]")
        if self.familiarity is not None and not (0 <= self.familiarity <= 1):
            raise AgentError(f"type {self.name}: familiarity must lie in [0, 1]")

    @property
    def max_speed(self) -> float:
        return self.speed_max * self.luggage_factor


# Calibration defaults; adjust per study.
DEFAULT_TYPES = {
    "commuter": PedestrianType("commuter", 1.34, 0.26, 0.5, 2.2, 0.23),
    "tourist_luggage": PedestrianType("tourist_luggage", 1.25, 0.22, 0.5, 2.0, 0.30, luggage_factor=0.8),
    "prm": PedestrianType("prm", 0.8, 0.15, 0.3, 1.2, 0.40, prm=True),
    "child": PedestrianType("child", 1.1, 0.2, 0.5, 1.6, 0.18),
}


def sample_attributes(ptype: PedestrianType, rng: np.random.Generator):
    """Return (preferred speed, radius); speed is a rejection-sampled
    truncated normal, then scaled by the luggage factor."""
    if ptype.speed_sd == 0:
        speed = ptype.speed_mean
    else:
        while True:
            speed = float(rng.normal(ptype.speed_mean, ptype.speed_sd))
            if ptype.speed_min <= speed <= ptype.speed_max:
                break
    return speed * ptype.luggage_factor, ptype.radius


def truncated_normal(rng: np.random.Generator, mean, sd, lo, hi) -> float:
    if sd == 0:
        return min(hi, max(lo, mean))
    for _ in range(10000):
        x = float(rng.normal(mean, sd))
        if lo <= x <= hi:
            return x
    raise AgentError("truncated normal rejection sampling did not converge")


def desired_velocity(position, preferred_speed: float, field, walls: WallIndex | None = None,
                     speed_factor: float = 1.0):
    """Descent direction of a navigation field scaled to the preferred speed.

    Returns ``(vector, status)``; status is ``"ok"``, ``"arrived"`` or
    ``"unreachable"`` (the latter two come with a zero vector).
    """
    pos = np.asarray([position], dtype=np.float64)
    walls = walls or field.walls
    dirs, status = kernels.backend().descend(
        field.dist.ravel(), field.grid.nx, field.grid.ny, field.grid.x0, field.grid.y0,
        field.grid.cell, pos, *kernels.wall_args(walls))
    s = int(status[0])
    v = dirs[0] * (preferred_speed * speed_factor)
    return v, ("ok", "arrived", "unreachable")[s]


def avoid_collisions(position, velocity, radius, desired, neighbors=(), walls: WallIndex | None = None,
                     dt: float = 0.1, perception: float = PERCEPTION_RADIUS, tau: float = HORIZON):
    """Admitted velocity for one agent given neighbours ``(pos, vel, radius)``."""
    pos = [position] + [n[0] for n in neighbors]
    vel = [velocity] + [n[1] for n in neighbors]
    rad = [radius] + [n[2] for n in neighbors]
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 2)
    vel = np.asarray(vel, dtype=np.float64).reshape(-1, 2)
    rad = np.asarray(rad, dtype=np.float64)
    des = np.zeros_like(pos)
    des[0] = desired
    mask = np.zeros(len(pos), dtype=np.uint8)
    mask[0] = 1
    active = np.ones(len(pos), dtype=np.uint8)
    cell = 2 * float(rad.max()) + float(np.hypot(*np.asarray(desired, float))) * dt + 1e-6
    h = build_hash(pos, cell)
    out = kernels.backend().avoid(pos, vel, rad, des, mask, active, *h.args(), perception, tau, dt,
                                  *kernels.candidate_table(), *kernels.wall_args(walls))
    return out[0]
