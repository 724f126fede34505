"""Randomized threshold policies and the closed-form budget-constrained optimum."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

from .errors import ChannelDead, InvalidBudget

# theta used for the never-transmit sentinel when the channel is dead
NEVER = math.inf


@dataclass(frozen=True)
class RandomizedThresholdPolicy:
    """Transmit iff tau > theta; at tau == theta transmit with probability r_theta."""

    theta: float  # int in practice; NEVER for the dead-channel sentinel
    r_theta: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.r_theta <= 1.0:
            raise ValueError(f"r_theta must lie in [0, 1], got {self.r_theta}")
        if self.theta < 0:
            raise ValueError(f"theta must be nonnegative, got {self.theta}")

    @property
    def is_deterministic(self) -> bool:
        return self.r_theta == 1.0

    @property
    def never_transmits(self) -> bool:
        return self.theta == NEVER

    def clipped(self, M: int) -> "RandomizedThresholdPolicy":
        """Deployable copy on the chain truncated at M."""
        if self.theta >= M:
            warnings.warn(
                f"threshold {self.theta} >= truncation level {M}; clipping to M",
                RuntimeWarning,
                stacklevel=2,
            )
            return RandomizedThresholdPolicy(M, 1.0)
        return self

    def to_dict(self):
        return {"theta": self.theta, "r_theta": self.r_theta}

    @classmethod
    def from_dict(cls, data):
        return cls(theta=int(data["theta"]), r_theta=float(data.get("r_theta", 1.0)))


def constrained_optimal_policy(r_s: float, b: float) -> RandomizedThresholdPolicy:
    """Optimal policy for average transmission budget ``b`` on channel ``r_s``.

    theta = floor(x) with x = (1 - b) / (r_s b), and r_theta = 1 - frac(x),
    so the long-run transmission rate is exactly ``b``.
    """
    if not (0.0 < b <= 1.0):
        raise InvalidBudget(f"budget must lie in (0, 1], got {b}")
    if not 0.0 <= r_s <= 1.0:
        raise ValueError(f"r_s must lie in [0, 1], got {r_s}")
    if r_s == 0.0:
        raise ChannelDead("r_s = 0: threshold is infinite; transmit until the first success")
    x = 1.0 / (r_s * b) - 1.0 / r_s
    nearest = round(x)
    # floor() on 2.9999999999 would pick the wrong cell and r_theta ~ 1e-10
    if abs(x - nearest) <= 1e-9 * max(1.0, abs(x)):
        x = float(nearest)
    theta = math.floor(x)
    r_theta = theta + 1.0 + (b - 1.0) / (b * r_s)
    r_theta = min(1.0, max(r_theta, 0.0))
    if r_theta == 0.0:  # only reachable through rounding
        theta, r_theta = theta + 1, 1.0
    return RandomizedThresholdPolicy(theta, r_theta)


def dead_channel_policy() -> RandomizedThresholdPolicy:
    return RandomizedThresholdPolicy(NEVER, 1.0)


def comm_rate(theta: int, r_s: float) -> float:
    """Long-run transmission rate of the deterministic threshold policy."""
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    return 1.0 / (r_s * theta + 1.0)


def decide(policy: RandomizedThresholdPolicy, tau: int, u: float) -> int:
    if tau < policy.theta:
        return 0
    if tau > policy.theta:
        return 1
    return 1 if u < policy.r_theta else 0
