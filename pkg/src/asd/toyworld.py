"""Synthetic causal sequence world with exact distributional oracles.

Frames follow a stable linear-Gaussian autoregression:

    frame_1 ~ N(init_mean, init_cov),  frame_i = A frame_{i-1} + b + Q^(1/2) eta.

Conditionals, noised marginals, and their scores are available in closed
form, so every learned component downstream can be checked against an
analytic answer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError
from .rng import derive_rng

# key for per-sequence rng streams: (seed, _SEQ_STREAM, index)
_SEQ_STREAM = 7001


@dataclass(frozen=True)
class WorldSpec:
    """Parameters of the linear-Gaussian world.

    A must be strictly stable (spectral radius < 1). The Cholesky-like
    factors only need non-negative diagonals; fully degenerate (zero)
    noise is allowed for analytic edge cases.
    """

    dim: int
    length: int
    transition: np.ndarray  # (D, D)
    drift: np.ndarray  # (D,)
    noise_chol: np.ndarray  # (D, D) lower triangular
    init_mean: np.ndarray  # (D,)
    init_cov_chol: np.ndarray  # (D, D) lower triangular

    def __post_init__(self):
        d = int(self.dim)
        for name in ("transition", "drift", "noise_chol", "init_mean", "init_cov_chol"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.length < 1:
            raise ConfigurationError(f"length must be >= 1, got {self.length}")
        shapes = {
            "transition": (d, d),
            "drift": (d,),
            "noise_chol": (d, d),
            "init_mean": (d,),
            "init_cov_chol": (d, d),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ConfigurationError(f"{name} must have shape {shape}")
        radius = float(np.max(np.abs(np.linalg.eigvals(self.transition))))
        if radius >= 1.0:
            raise ConfigurationError(f"transition spectral radius {radius:.4f} >= 1")
        for name in ("noise_chol", "init_cov_chol"):
            m = getattr(self, name)
            if np.any(np.triu(m, 1) != 0.0):
                raise ConfigurationError(f"{name} must be lower triangular")
            if np.any(np.diag(m) < 0.0):
                raise ConfigurationError(f"{name} diagonal must be non-negative")

    @property
    def noise_cov(self) -> np.ndarray:
        return self.noise_chol @ self.noise_chol.T

    @property
    def init_cov(self) -> np.ndarray:
        return self.init_cov_chol @ self.init_cov_chol.T


@dataclass(frozen=True)
class FrameSequence:
    """One sampled sequence (L, D) with its seed for provenance."""

    frames: np.ndarray
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "frames", np.asarray(self.frames, dtype=np.float64))
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ConfigurationError(f"frames must be (L, D) with L >= 1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ConfigurationError("frames contain non-finite values")


def default_world(
    dim: int = 8,
    length: int = 8,
    transition_scale: float = 0.9,
    noise_scale: float = 0.19,
    seed: int = 0,
) -> WorldSpec:
    """Stable default: A = scale * (random orthogonal), stationary at unit scale."""
    rng = derive_rng(seed, 0)
    m = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))  # Haar-distributed orthogonal
    return WorldSpec(
        dim=dim,
        length=length,
        transition=transition_scale * q,
        drift=np.zeros(dim),
        noise_chol=np.sqrt(noise_scale) * np.eye(dim),
        init_mean=np.zeros(dim),
        init_cov_chol=np.eye(dim),
    )


# -----------------------------------------------------------------------------
# Sampling
# -----------------------------------------------------------------------------


def sample_sequence(spec: WorldSpec, seed: int) -> FrameSequence:
    """One sequence from its own derived stream; identical seed, identical bits."""
    rng = derive_rng(seed, _SEQ_STREAM, 0)
    frames = np.empty((spec.length, spec.dim))
    frames[0] = spec.init_mean + spec.init_cov_chol @ rng.standard_normal(spec.dim)
    for i in range(1, spec.length):
        eta = rng.standard_normal(spec.dim)
        frames[i] = spec.transition @ frames[i - 1] + spec.drift + spec.noise_chol @ eta
    return FrameSequence(frames, seed)


def sample_sequences(spec: WorldSpec, rng: np.random.Generator, count: int) -> np.ndarray:
    """(count, L, D) batch drawn vectorized from one generator stream."""
    frames = np.empty((count, spec.length, spec.dim))
    frames[:, 0] = spec.init_mean + rng.standard_normal((count, spec.dim)) @ spec.init_cov_chol.T
    for i in range(1, spec.length):
        eta = rng.standard_normal((count, spec.dim))
        frames[:, i] = frames[:, i - 1] @ spec.transition.T + spec.drift + eta @ spec.noise_chol.T
    return frames


# -----------------------------------------------------------------------------
# Closed-form conditionals and scores
# -----------------------------------------------------------------------------


def conditional_stats(
    spec: WorldSpec, context: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and Cholesky factor of p(frame | previous frame).

    context=None selects the first-frame (unconditional) distribution.
    """
    if context is None:
        return spec.init_mean.copy(), spec.init_cov_chol.copy()
    context = np.asarray(context, dtype=np.float64)
    if context.shape != (spec.dim,):
        raise ConfigurationError(f"context must have shape ({spec.dim},)")
    return spec.transition @ context + spec.drift, spec.noise_chol.copy()


def _check_t(t: float) -> float:
    t = float(t)
    if not 0.0 < t <= 1.0:
        raise DomainError(f"t must lie in (0, 1], got {t}")
    return t


def analytic_noisy_score(
    spec: WorldSpec, context: np.ndarray | None, x_t: np.ndarray, t: float
) -> np.ndarray:
    """Exact score of the noised conditional at x_t.

    With x_t = (1-t) x0 + t eps and x0 ~ N(m, S), the noised marginal is
    N((1-t) m, (1-t)^2 S + t^2 I); the score is -C^{-1} (x_t - (1-t) m).
    """
    t = _check_t(t)
    mean, chol = conditional_stats(spec, context)
    cov = chol @ chol.T
    c = (1.0 - t) ** 2 * cov + t**2 * np.eye(spec.dim)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (spec.dim,):
        raise ConfigurationError(f"x_t must have shape ({spec.dim},)")
    return -np.linalg.solve(c, x_t - (1.0 - t) * mean)


def analytic_optimal_eps(
    spec: WorldSpec, context: np.ndarray | None, x_t: np.ndarray, t: float
) -> np.ndarray:
    """Bayes-optimal eps-prediction: eps* = -sigma_t * score with sigma_t = t."""
    t = _check_t(t)
    return -t * analytic_noisy_score(spec, context, x_t, t)


def analytic_score_batch(
    spec: WorldSpec,
    x_t: np.ndarray,
    t: np.ndarray,
    contexts: np.ndarray,
    first: np.ndarray,
) -> np.ndarray:
    """Vectorized analytic score for a mixed batch.

    Rows flagged `first` use the unconditional stats; the others condition on
    their context row. t may vary per row.
    """
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x_t.shape[0],)).copy()
    first = np.broadcast_to(np.asarray(first, dtype=bool), (x_t.shape[0],))
    if np.any(t <= 0.0) or np.any(t > 1.0):
        raise DomainError("t must lie in (0, 1]")

    d = spec.dim
    means = contexts @ spec.transition.T + spec.drift
    means[first] = spec.init_mean
    covs = np.where(first[:, None, None], spec.init_cov, spec.noise_cov)
    one_m_t = (1.0 - t)[:, None, None]
    c = one_m_t**2 * covs + (t**2)[:, None, None] * np.eye(d)
    resid = x_t - (1.0 - t)[:, None] * means
    return -np.linalg.solve(c, resid[..., None])[..., 0]


def analytic_eps_batch(
    spec: WorldSpec,
    x_t: np.ndarray,
    t: np.ndarray,
    contexts: np.ndarray,
    first: np.ndarray,
) -> np.ndarray:
    t_col = np.broadcast_to(np.asarray(t, dtype=np.float64), (np.atleast_2d(x_t).shape[0],))
    return -t_col[:, None] * analytic_score_batch(spec, x_t, t, contexts, first)


def stationary_cov(spec: WorldSpec) -> np.ndarray:
    """Solve S = A S A^T + Q for the stationary covariance (vectorized solve)."""
    d = spec.dim
    a = spec.transition
    lhs = np.eye(d * d) - np.kron(a, a)
    vec = np.linalg.solve(lhs, spec.noise_cov.reshape(-1))
    return vec.reshape(d, d)


# -----------------------------------------------------------------------------
# Key-value serialization of a world (written next to generated datasets)
# -----------------------------------------------------------------------------


def world_to_kv(spec: WorldSpec) -> dict[str, str]:
    def fmt(a: np.ndarray) -> str:
        return ",".join(format(v, ".17g") for v in np.asarray(a).reshape(-1))

    return {
        "dim": str(spec.dim),
        "length": str(spec.length),
        "transition": fmt(spec.transition),
        "drift": fmt(spec.drift),
        "noise_chol": fmt(spec.noise_chol),
        "init_mean": fmt(spec.init_mean),
        "init_cov_chol": fmt(spec.init_cov_chol),
    }


def world_from_kv(kv: dict[str, str]) -> WorldSpec:
    try:
        d = int(kv["dim"])
        length = int(kv["length"])

        def arr(key: str, shape: tuple[int, ...]) -> np.ndarray:
            return np.array([float(p) for p in kv[key].split(",")]).reshape(shape)

        return WorldSpec(
            dim=d,
            length=length,
            transition=arr("transition", (d, d)),
            drift=arr("drift", (d,)),
            noise_chol=arr("noise_chol", (d, d)),
            init_mean=arr("init_mean", (d,)),
            init_cov_chol=arr("init_cov_chol", (d, d)),
        )
    except KeyError as e:
        raise ConfigurationError(f"world block is missing key {e}") from e
