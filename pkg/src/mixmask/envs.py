"""Cart-and-pole physics: the stationary CP task and its nCP variant.

CP uses fixed canonical constants; nCP resamples pole half-length, pole
mass, and cart mass independently at every trial to probe generalization.
Observations are (cart position, cart velocity, pole angle, pole angular
velocity). Reward is +1 per surviving step; leaving the angle/position
bounds ends the episode with -1, while reaching the 500-step cap counts
as success and keeps the +1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ANGLE_LIMIT_RAD = math.radians(15.0)
POSITION_LIMIT = 2.4
STEP_CAP = 500
RESET_BOUND = 0.05


@dataclass(frozen=True)
class PhysicsParams:
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_half_length: float = 0.5
    force_magnitude: float = 10.0
    timestep: float = 0.02

    def __post_init__(self):
        for field_name in ("cart_mass", "pole_mass", "pole_half_length", "timestep"):
            if getattr(self, field_name) <= 0:
                raise ValueError(f"PhysicsParams.{field_name} must be strictly positive")


CANONICAL_PARAMS = PhysicsParams()


@dataclass(frozen=True)
class NcpRanges:
    """Uniform per-trial sampling ranges for the non-stationary variant."""

    pole_half_length: tuple[float, float] = (0.25, 1.0)
    pole_mass: tuple[float, float] = (0.05, 0.5)
    cart_mass: tuple[float, float] = (0.5, 2.0)


@dataclass
class EnvState:
    cart_position: float
    cart_velocity: float
    pole_angle: float
    pole_angular_velocity: float
    step_count: int = 0

    def observation(self) -> np.ndarray:
        return np.array([self.cart_position, self.cart_velocity,
                         self.pole_angle, self.pole_angular_velocity])


class TerminalStepError(RuntimeError):
    """Stepping an episode that has already terminated."""


def is_terminal(state: EnvState) -> bool:
    return (abs(state.pole_angle) > ANGLE_LIMIT_RAD
            or abs(state.cart_position) > POSITION_LIMIT
            or state.step_count >= STEP_CAP)


def reset(mode: str, rng: np.random.Generator,
          ncp_ranges: NcpRanges | None = None) -> tuple[EnvState, PhysicsParams]:
    """Fresh trial: state uniform in [-0.05, 0.05]^4; nCP resamples physics."""
    if mode not in ("cp", "ncp"):
        raise ValueError(f"unknown environment mode: {mode!r}")
    vals = rng.uniform(-RESET_BOUND, RESET_BOUND, size=4)
    state = EnvState(*vals)
    if mode == "cp":
        return state, CANONICAL_PARAMS
    r = ncp_ranges or NcpRanges()
    params = PhysicsParams(
        pole_half_length=float(rng.uniform(*r.pole_half_length)),
        pole_mass=float(rng.uniform(*r.pole_mass)),
        cart_mass=float(rng.uniform(*r.cart_mass)),
    )
    return state, params


def _accelerations(theta, theta_dot, p: PhysicsParams, force):
    """Cart/pole accelerations from the standard pole-on-cart dynamics."""
    cos_t = np.cos(theta)
    sin_t = np.sin(theta)
    total_mass = p.cart_mass + p.pole_mass
    polemass_length = p.pole_mass * p.pole_half_length
    temp = (force + polemass_length * theta_dot ** 2 * sin_t) / total_mass
    theta_acc = (p.gravity * sin_t - cos_t * temp) / (
        p.pole_half_length * (4.0 / 3.0 - p.pole_mass * cos_t ** 2 / total_mass))
    x_acc = temp - polemass_length * theta_acc * cos_t / total_mass
    return x_acc, theta_acc


def step(state: EnvState, params: PhysicsParams, action: int) -> tuple[EnvState, float, bool]:
    """Semi-implicit Euler update; velocities advance first, then positions."""
    if action not in (0, 1):
        raise ValueError(f"action must be 0 or 1, got {action!r}")
    if is_terminal(state):
        raise TerminalStepError("step() called on a terminal state")
    force = params.force_magnitude if action == 1 else -params.force_magnitude
    x_acc, theta_acc = _accelerations(state.pole_angle, state.pole_angular_velocity,
                                      params, force)
    dt = params.timestep
    x_dot = state.cart_velocity + dt * x_acc
    x = state.cart_position + dt * x_dot
    theta_dot = state.pole_angular_velocity + dt * theta_acc
    theta = state.pole_angle + dt * theta_dot
    new = EnvState(float(x), float(x_dot), float(theta), float(theta_dot), state.step_count + 1)
    failed = abs(theta) > ANGLE_LIMIT_RAD or abs(x) > POSITION_LIMIT
    done = failed or new.step_count >= STEP_CAP
    reward = -1.0 if failed else 1.0
    return new, reward, done


class VecCartPole:
    """Lockstep batch of independent trials for fast evaluation.

    Dynamics are the scalar `step` formulas broadcast over numpy arrays;
    finished trials freeze in place until every trial is done.
    """

    def __init__(self, mode: str, n: int, rng: np.random.Generator,
                 ncp_ranges: NcpRanges | None = None):
        self.n = n
        self.states = rng.uniform(-RESET_BOUND, RESET_BOUND, size=(n, 4))
        self.steps = np.zeros(n, dtype=int)
        self.done = np.zeros(n, dtype=bool)
        self.returns = np.zeros(n)
        if mode == "cp":
            base = CANONICAL_PARAMS
            self.half_length = np.full(n, base.pole_half_length)
            self.pole_mass = np.full(n, base.pole_mass)
            self.cart_mass = np.full(n, base.cart_mass)
        elif mode == "ncp":
            r = ncp_ranges or NcpRanges()
            self.half_length = rng.uniform(*r.pole_half_length, size=n)
            self.pole_mass = rng.uniform(*r.pole_mass, size=n)
            self.cart_mass = rng.uniform(*r.cart_mass, size=n)
        else:
            raise ValueError(f"unknown environment mode: {mode!r}")
        self.gravity = CANONICAL_PARAMS.gravity
        self.force_magnitude = CANONICAL_PARAMS.force_magnitude
        self.dt = CANONICAL_PARAMS.timestep

    def step(self, actions: np.ndarray) -> None:
        active = ~self.done
        if not active.any():
            return
        s = self.states[active]
        x, x_dot, theta, theta_dot = s[:, 0], s[:, 1], s[:, 2], s[:, 3]
        force = np.where(actions[active] == 1, self.force_magnitude, -self.force_magnitude)
        cos_t = np.cos(theta)
        sin_t = np.sin(theta)
        total_mass = self.cart_mass[active] + self.pole_mass[active]
        polemass_length = self.pole_mass[active] * self.half_length[active]
        temp = (force + polemass_length * theta_dot ** 2 * sin_t) / total_mass
        theta_acc = (self.gravity * sin_t - cos_t * temp) / (
            self.half_length[active] * (4.0 / 3.0 - self.pole_mass[active] * cos_t ** 2 / total_mass))
        x_acc = temp - polemass_length * theta_acc * cos_t / total_mass
        x_dot = x_dot + self.dt * x_acc
        x = x + self.dt * x_dot
        theta_dot = theta_dot + self.dt * theta_acc
        theta = theta + self.dt * theta_dot
        self.states[active] = np.stack([x, x_dot, theta, theta_dot], axis=1)
        self.steps[active] += 1
        failed = (np.abs(theta) > ANGLE_LIMIT_RAD) | (np.abs(x) > POSITION_LIMIT)
        capped = self.steps[active] >= STEP_CAP
        reward = np.where(failed, -1.0, 1.0)
        self.returns[active] += reward
        idx = np.flatnonzero(active)
        self.done[idx[failed | capped]] = True

    def all_done(self) -> bool:
        return bool(self.done.all())
