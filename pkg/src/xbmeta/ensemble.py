"""Weight-space averaging over a training trajectory.

The Gaussian weight average (GWA) gives epoch ``t`` the weight of a normal
density evaluated at ``t``, so middle epochs dominate while the earliest and
latest snapshots are damped. It is kept as a streaming average so only one
extra copy of the parameters is ever stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, LayoutError
from .params import ParamVector


def log_gaussian_weight(t: int, mu: float, sigma2: float) -> float:
    if not sigma2 > 0:
        raise ConfigError(f"sigma2 must be positive, got {sigma2}")
    if t < 1:
        raise ConfigError(f"epoch index must be >= 1, got {t}")
    return -((t - mu) ** 2) / (2.0 * sigma2) - 0.5 * math.log(2.0 * math.pi * sigma2)


def gaussian_weight(t: int, mu: float, sigma2: float) -> float:
    if not sigma2 > 0:
        raise ConfigError(f"sigma2 must be positive, got {sigma2}")
    if t < 1:
        raise ConfigError(f"epoch index must be >= 1, got {t}")
    return math.exp(-((t - mu) ** 2) / (2.0 * sigma2)) / (math.sqrt(2.0 * math.pi) * math.sqrt(sigma2))


def normalize_weights(w: Sequence[float]) -> list[float]:
    w = [float(x) for x in w]
    if not w:
        raise ConfigError("need at least one weight")
    if any(not x > 0 for x in w):
        raise ConfigError("weights must be strictly positive")
    total = math.fsum(w)
    return [x / total for x in w]


def default_mu(horizon: int) -> float:
    """Peak epoch used when none is configured: 60% of the way through."""
    return float(math.ceil(0.6 * horizon))


@dataclass(frozen=True)
class GwaState:
    """Streaming GWA accumulator.

    ``log_cumulative`` mirrors ``cumulative_weight`` in log space so the
    mixing ratios stay defined when individual weights underflow.
    """

    running_avg: Optional[ParamVector]
    cumulative_weight: float
    t: int
    mu: float
    sigma2: float
    horizon: int
    step_length: int
    log_cumulative: float = -math.inf

    @classmethod
    def start(cls, horizon: int, step_length: int, mu: Optional[float] = None,
              sigma2: float = 10.0, template: Optional[ParamVector] = None) -> "GwaState":
        if horizon < 1 or step_length < 1:
            raise ConfigError("horizon and step_length must be positive")
        if not sigma2 > 0:
            raise ConfigError("sigma2 must be positive")
        if mu is None:
            mu = default_mu(horizon)
        return cls(template, 0.0, 0, float(mu), float(sigma2), int(horizon), int(step_length))


def gwa_update(state: GwaState, theta_t: ParamVector) -> GwaState:
    """Fold the next epoch snapshot into the running average."""
    if state.t >= state.horizon:
        raise ConfigError(f"GWA already holds {state.t} of {state.horizon} snapshots")
    w = gaussian_weight(state.t + 1, state.mu, state.sigma2)
    log_w = log_gaussian_weight(state.t + 1, state.mu, state.sigma2)
    log_total = float(np.logaddexp(state.log_cumulative, log_w))
    if state.t == 0:
        avg = theta_t
    else:
        if theta_t.layout != state.running_avg.layout:
            raise LayoutError("snapshot layout differs from the running average")
        total = state.cumulative_weight + w
        if total > 0:
            keep, take = state.cumulative_weight / total, w / total
        else:
            keep, take = math.exp(state.log_cumulative - log_total), math.exp(log_w - log_total)
        avg = theta_t.with_values(keep * state.running_avg.values + take * theta_t.values)
    return replace(state, running_avg=avg, cumulative_weight=state.cumulative_weight + w, t=state.t + 1,
                   log_cumulative=log_total)


def gwa_finalize(state: GwaState) -> ParamVector:
    if state.t == 0:
        raise ConfigError("GWA has no snapshots; trajectory is empty")
    return state.running_avg


def gwa_direct(thetas: Sequence[ParamVector], mu: float, sigma2: float) -> ParamVector:
    """Non-streaming GWA: explicit normalized weighted sum of all snapshots."""
    log_w = np.array([log_gaussian_weight(t, mu, sigma2) for t in range(1, len(thetas) + 1)])
    alphas = np.exp(log_w - np.logaddexp.reduce(log_w))
    return _weighted_sum(thetas, alphas)


def _weighted_sum(thetas, alphas):
    first = thetas[0]
    acc = np.zeros_like(first.values)
    for theta, a in zip(thetas, alphas):
        if theta.layout != first.layout:
            raise LayoutError("trajectory layouts differ")
        acc = acc + a * theta.values
    return first.with_values(acc)


def weight_average_with_anchor(theta0: ParamVector, thetas: Sequence[ParamVector], alphas: Sequence[float]) -> ParamVector:
    """``(1 - sum(alphas)) * theta0 + sum_t alphas[t] * thetas[t]``."""
    if len(thetas) != len(alphas):
        raise ConfigError("need one coefficient per snapshot")
    if any(a < 0 or a > 1 for a in alphas):
        raise ConfigError("coefficients must lie in [0, 1]")
    total = math.fsum(alphas)
    if total > 1 + 1e-12:
        raise ConfigError(f"coefficients sum to {total} > 1")
    acc = (1.0 - total) * theta0.values
    for theta, a in zip(thetas, alphas):
        if theta.layout != theta0.layout:
            raise LayoutError("snapshot layout differs from anchor")
        acc = acc + a * theta.values
    return theta0.with_values(acc)


def baseline_average(thetas: Sequence[ParamVector], scheme: str = "uniform", decay: float = 0.9) -> ParamVector:
    """Uniform mean or exponential moving average of a trajectory."""
    if not thetas:
        raise ConfigError("empty trajectory")
    if scheme == "uniform":
        return _weighted_sum(thetas, [1.0 / len(thetas)] * len(thetas))
    if scheme == "ema":
        if not 0 < decay < 1:
            raise ConfigError("ema decay must lie in (0, 1)")
        avg = thetas[0].values
        for theta in thetas[1:]:
            if theta.layout != thetas[0].layout:
                raise LayoutError("trajectory layouts differ")
            avg = decay * avg + (1 - decay) * theta.values
        return thetas[0].with_values(avg)
    raise ConfigError(f"unknown averaging scheme {scheme!r}")
