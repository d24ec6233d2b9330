"""Distributional scalarization of the two actor-critic costs and
projection of conflicting shared-parameter gradients.

Scalarization standardizes each cost so that the cost of the untrained
functions sits at a chosen z-score: sigma is the sample std of untrained
rollout costs, and mu = J0 - z * sigma places the untrained anchor exactly
at z. The stationary variant calibrates once and never updates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class ObjectiveScale:
    anchor: float  # mean untrained cost J0
    sigma: float
    z: float

    @property
    def mu(self) -> float:
        return self.anchor - self.z * self.sigma


@dataclass(frozen=True)
class ScalarizerParams:
    policy: ObjectiveScale
    value: ObjectiveScale
    stationary: bool = True


def _scale_from_samples(samples, z: float) -> ObjectiveScale:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size < 2:
        raise ValueError("calibration needs at least 2 cost samples per objective")
    sigma = float(arr.std(ddof=1))
    if sigma < SIGMA_FLOOR:
        log.warning("calibration samples nearly constant; sigma floored at %.0e", SIGMA_FLOOR)
        sigma = SIGMA_FLOOR
    return ObjectiveScale(anchor=float(arr.mean()), sigma=sigma, z=z)


def calibrate(cost_samples_pi, cost_samples_v, z: float) -> ScalarizerParams:
    """Fit per-objective standardization from untrained rollout costs."""
    return ScalarizerParams(
        policy=_scale_from_samples(cost_samples_pi, z),
        value=_scale_from_samples(cost_samples_v, z),
    )


def scalarize(j_pi: float, j_v: float, params: ScalarizerParams) -> float:
    """Sum of standardized costs; each untrained anchor maps exactly to z."""
    return ((j_pi - params.policy.mu) / params.policy.sigma
            + (j_v - params.value.mu) / params.value.sigma)


def scalarize_terms(j_pi: Tensor, j_v: Tensor, params: ScalarizerParams) -> tuple[Tensor, Tensor]:
    """Graph-side standardization of the two cost tensors."""
    t_pi = ad.scale(ad.add(j_pi, Tensor(-params.policy.mu)), 1.0 / params.policy.sigma)
    t_v = ad.scale(ad.add(j_v, Tensor(-params.value.mu)), 1.0 / params.value.sigma)
    return t_pi, t_v


def pcgrad(g1: np.ndarray, g2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project each gradient onto the other's normal plane when conflicting.

    Both projections use the pre-projection counterpart, so the result is
    order-independent for this two-objective case. Non-conflicting pairs
    pass through unchanged.
    """
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise ValueError(f"pcgrad: gradient lengths differ, {g1.shape} vs {g2.shape}")
    dot = float(g1 @ g2)
    if dot >= 0.0:
        return g1.copy(), g2.copy()
    n1 = float(g1 @ g1)
    n2 = float(g2 @ g2)
    if n1 == 0.0 or n2 == 0.0:
        log.warning("pcgrad: zero-norm opposing gradient; projection skipped")
        return g1.copy(), g2.copy()
    out1 = g1 - (dot / n2) * g2
    out2 = g2 - (dot / n1) * g1
    return out1, out2
