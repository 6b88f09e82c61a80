"""Forward noising process, score conversion, and discrete denoising grids.

The forward process is the straight-line interpolation
x_t = (1-t) x0 + t eps, so sigma_t = t and the score of an eps-prediction
is -eps / t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly decreasing denoising timesteps t_1 > ... > t_N in (0, 1].

    Generation starts from pure noise, so t_1 must be exactly 1.0.
    """

    timesteps: tuple[float, ...]

    def __post_init__(self):
        ts = tuple(float(t) for t in self.timesteps)
        object.__setattr__(self, "timesteps", ts)
        if len(ts) < 1:
            raise ConfigurationError("schedule needs at least one timestep")
        if ts[0] != 1.0:
            raise ConfigurationError(f"first timestep must be 1.0, got {ts[0]}")
        if any(not (0.0 < t <= 1.0) for t in ts):
            raise ConfigurationError(f"timesteps must lie in (0, 1]: {ts}")
        if any(ts[i] <= ts[i + 1] for i in range(len(ts) - 1)):
            raise ConfigurationError(f"timesteps must be strictly decreasing: {ts}")

    @property
    def n_steps(self) -> int:
        return len(self.timesteps)

    def prefix(self, n: int) -> tuple[float, ...]:
        """First n timesteps (used for n-step generation)."""
        if not 1 <= n <= self.n_steps:
            raise DomainError(f"prefix length {n} outside 1..{self.n_steps}")
        return self.timesteps[:n]

    def as_array(self) -> np.ndarray:
        return np.array(self.timesteps, dtype=np.float64)

    def format(self) -> str:
        """Comma-separated form used in config files."""
        return ",".join(format(t, "g") for t in self.timesteps)

    @classmethod
    def parse(cls, text: str) -> "NoiseSchedule":
        return cls(tuple(float(p) for p in text.split(",") if p.strip()))


def make_schedule(n: int) -> NoiseSchedule:
    """Uniformly spaced schedule t_j = 1 - (j-1)/N, e.g. N=4 -> 1, .75, .5, .25."""
    if n < 1:
        raise DomainError(f"step count must be >= 1, got {n}")
    return NoiseSchedule(tuple(1.0 - j / n for j in range(n)))


def add_noise(x0: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    """Interpolate (1-t) x0 + t eps; t is a scalar or per-row vector."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ConfigurationError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise DomainError(f"t must lie in [0, 1], got {t}")
    if t_arr.ndim == 1 and x0.ndim == 2:
        t_arr = t_arr[:, None]
    return (1.0 - t_arr) * x0 + t_arr * eps


def score_from_eps(eps_pred: np.ndarray, sigma_t) -> np.ndarray:
    """Score of the noised distribution from an eps-prediction: -eps / sigma."""
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    sig = np.asarray(sigma_t, dtype=np.float64)
    if np.any(sig <= 0.0):
        raise DomainError(f"sigma_t must be > 0, got {sigma_t}")
    if sig.ndim == 1 and eps_pred.ndim == 2:
        sig = sig[:, None]
    return -eps_pred / sig
