"""Training objectives: distribution-matching gradient, fake-score denoising
loss, and the relativistic self-distillation pair losses with perturbation
regularization.

Every stochastic loss is split into a tape-drawing step and a deterministic
"from_tape" evaluation, so gradients can be verified against central
differences on a frozen realization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericError
from .models import (
    EpsNet,
    SequenceRollout,
    StudentNet,
    as_score_fn,
    critic_head_grad,
    critic_input_grad,
    critic_logit,
    eps_predict,
    net_inputs,
    sequence_backward,
)
from .numerics import ParamVector, backward
from .schedule import NoiseSchedule, add_noise


@dataclass(frozen=True)
class LossBreakdown:
    """Per-iteration scalars written to the training log."""

    dmd: float
    asd_gen: float
    asd_disc: float
    reg: float
    fake_score: float
    total_gen: float
    alpha: float
    lambda_reg: float
    sigma_perturb: float

    def finite(self) -> bool:
        vals = (self.dmd, self.asd_gen, self.asd_disc, self.reg, self.fake_score, self.total_gen)
        return all(math.isfinite(v) for v in vals)


def total_generator_loss(dmd_part: float, asd_gen_part: float, alpha: float, asd_active: bool) -> float:
    """Combined generator objective: dmd + alpha * asd when active, else dmd."""
    if asd_active:
        return float(dmd_part) + float(alpha) * float(asd_gen_part)
    return float(dmd_part)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def draw_step_times(
    rng: np.random.Generator,
    allowed: np.ndarray,
    length: int,
    batch: int,
    chunk_size: int = 1,
) -> np.ndarray:
    """Frame-major (length*batch,) timestep draws from a discrete set.

    Consecutive frames in groups of `chunk_size` share one draw per sequence.
    """
    if chunk_size < 1:
        raise ConfigurationError(f"chunk_size must be >= 1, got {chunk_size}")
    allowed = np.asarray(allowed, dtype=np.float64)
    n_chunks = -(-length // chunk_size)
    idx = rng.integers(0, allowed.size, size=(n_chunks, batch))
    per_frame = np.repeat(allowed[idx], chunk_size, axis=0)[:length]
    return per_frame.reshape(length * batch)


# -----------------------------------------------------------------------------
# Distribution matching (reverse-KL score-difference gradient)
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class DmdTape:
    t: np.ndarray  # (M,)
    eps: np.ndarray  # (M, D)


def draw_dmd_tape(
    rng: np.random.Generator,
    schedule: NoiseSchedule,
    length: int,
    batch: int,
    dim: int,
    chunk_size: int = 1,
) -> DmdTape:
    t = draw_step_times(rng, schedule.as_array(), length, batch, chunk_size)
    eps = rng.standard_normal((length * batch, dim))
    return DmdTape(t, eps)


def dmd_from_tape(
    student: StudentNet,
    data_score,
    gen_score,
    roll: SequenceRollout,
    tape: DmdTape,
    normalize: bool = False,
) -> tuple[np.ndarray, float, np.ndarray]:
    """Gradient, surrogate value, and the frozen score difference.

    The surrogate is mean <-delta, x0> with delta = s_data - s_gen evaluated
    at the noised predictions and treated as a constant; its gradient w.r.t.
    the student parameters is returned (flat values).
    """
    x0 = roll.x0_flat()
    contexts = roll.contexts_flat()
    first = roll.first_flat()
    x_t = add_noise(x0, tape.eps, tape.t)
    delta = data_score(x_t, tape.t, contexts, first) - gen_score(x_t, tape.t, contexts, first)
    if not np.all(np.isfinite(delta)):
        raise NumericError("non-finite score difference", {"max_x0": float(np.max(np.abs(x0)))})
    if normalize:
        delta = delta / (np.mean(np.abs(delta), axis=1, keepdims=True) + 1e-8)
    upstream = -delta / x0.shape[0]
    grads = sequence_backward(student, roll, upstream)
    value = float(np.sum(upstream * x0))
    return grads, value, delta


def dmd_generator_grad(
    student: StudentNet,
    teacher_score_source,
    fake_eps_net,
    roll: SequenceRollout,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    world_spec=None,
    normalize: bool = False,
    chunk_size: int = 1,
) -> tuple[ParamVector, float, DmdTape]:
    """Draw a noising tape and compute the distribution-matching gradient."""
    data_score = as_score_fn(teacher_score_source, world_spec)
    gen_score = as_score_fn(fake_eps_net, world_spec)
    tape = draw_dmd_tape(
        rng, schedule, roll.n_frames, roll.batch, student.spec.frame_dim, chunk_size
    )
    grads, value, _ = dmd_from_tape(student, data_score, gen_score, roll, tape, normalize)
    return student.params.with_values(grads), value, tape


# -----------------------------------------------------------------------------
# Fake-score (teaching-assistant) denoising loss
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class FakeTape:
    t: np.ndarray  # (M,)
    eps: np.ndarray  # (M, D)


def draw_fake_tape(
    rng: np.random.Generator,
    schedule: NoiseSchedule,
    length: int,
    batch: int,
    dim: int,
    chunk_size: int = 1,
) -> FakeTape:
    t = draw_step_times(rng, schedule.as_array(), length, batch, chunk_size)
    eps = rng.standard_normal((length * batch, dim))
    return FakeTape(t, eps)


def fake_score_loss_from_tape(
    fake_net: EpsNet, x0: np.ndarray, contexts: np.ndarray, tape: FakeTape
) -> float:
    x_t = add_noise(x0, tape.eps, tape.t)
    eps_hat, _ = eps_predict(fake_net, x_t, tape.t, contexts)
    return float(np.mean(np.sum((eps_hat - tape.eps) ** 2, axis=1)))


def fake_score_grad_from_tape(
    fake_net: EpsNet, x0: np.ndarray, contexts: np.ndarray, tape: FakeTape
) -> tuple[np.ndarray, float]:
    """(flat gradient values, loss). x0 must already be detached."""
    x_t = add_noise(x0, tape.eps, tape.t)
    eps_hat, _ = eps_predict(fake_net, x_t, tape.t, contexts)
    m = x0.shape[0]
    upstream = 2.0 * (eps_hat - tape.eps) / m
    values = eps_net_backward(fake_net, x_t, tape.t, contexts, upstream)
    loss = float(np.mean(np.sum((eps_hat - tape.eps) ** 2, axis=1)))
    return values, loss


def fake_score_loss(
    fake_net: EpsNet,
    x0: np.ndarray,
    contexts: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    chunk_size: int = 1,
) -> float:
    """Denoising MSE of the fake net on (detached) generated frames at a
    uniformly drawn schedule timestep."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    tape = draw_fake_tape(rng, schedule, x0.shape[0], 1, x0.shape[1], chunk_size)
    return fake_score_loss_from_tape(fake_net, x0, contexts, tape)


# -----------------------------------------------------------------------------
# Adversarial self-distillation: relativistic pair losses + perturbation penalty
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class AsdTape:
    """One adversarial evaluation: shared t, independent noising and
    perturbation draws for the n-step and (n+1)-step branches."""

    n: int
    t: float
    eps_n: np.ndarray  # (M, D)
    eps_n1: np.ndarray  # (M, D)
    reg_eps_n: np.ndarray  # (M, D)
    reg_eps_n1: np.ndarray  # (M, D)


def asd_allowed_times(schedule: NoiseSchedule, exclude_last: bool = True) -> tuple[float, ...]:
    """Timesteps eligible for adversarial noising; by default the final
    (cleanest) step is excluded."""
    ts = schedule.timesteps
    if exclude_last and len(ts) > 1:
        return ts[:-1]
    return ts


def _check_asd_n(n: int, schedule: NoiseSchedule) -> None:
    big_n = schedule.n_steps
    if n == big_n:
        raise ConfigurationError(
            f"adversarial pairing is undefined for the last step (n={n} of {big_n})"
        )
    if not 1 <= n <= big_n - 1:
        raise ConfigurationError(f"pair index n={n} outside 1..{big_n - 1}")


def draw_asd_tape(
    rng: np.random.Generator,
    schedule: NoiseSchedule,
    n: int,
    m: int,
    dim: int,
    exclude_last: bool = True,
) -> AsdTape:
    _check_asd_n(n, schedule)
    allowed = asd_allowed_times(schedule, exclude_last)
    t = float(allowed[rng.integers(0, len(allowed))])
    return AsdTape(
        n=n,
        t=t,
        eps_n=rng.standard_normal((m, dim)),
        eps_n1=rng.standard_normal((m, dim)),
        reg_eps_n=rng.standard_normal((m, dim)),
        reg_eps_n1=rng.standard_normal((m, dim)),
    )


def _asd_logits(head, fake_net, x0_n, ctx_n, x0_n1, ctx_n1, tape, sigma):
    t = tape.t
    x_t_n = add_noise(x0_n, tape.eps_n, t)
    x_t_n1 = add_noise(x0_n1, tape.eps_n1, t)
    l_n = critic_logit(head, fake_net, x_t_n, t, ctx_n, tape.n)
    l_n1 = critic_logit(head, fake_net, x_t_n1, t, ctx_n1, tape.n)
    l_n_p = critic_logit(head, fake_net, x_t_n + sigma * tape.reg_eps_n, t, ctx_n, tape.n)
    l_n1_p = critic_logit(head, fake_net, x_t_n1 + sigma * tape.reg_eps_n1, t, ctx_n1, tape.n)
    return x_t_n, x_t_n1, l_n, l_n1, l_n_p, l_n1_p


def asd_values_from_tape(
    head,
    fake_net: EpsNet,
    x0_n: np.ndarray,
    ctx_n: np.ndarray,
    x0_n1: np.ndarray,
    ctx_n1: np.ndarray,
    tape: AsdTape,
    lam: float,
    sigma: float,
) -> tuple[float, float, float]:
    """(generator loss, discriminator loss, perturbation penalty).

    disc = -E log sigmoid(f(x^{n+1}) - f(x^n)) + lam * reg
    gen  = -E log sigmoid(f(x^n) - f(x^{n+1}))
    reg  = 0.5 E [ (f(x^{n+1}) - f(x^{n+1}+sigma e))^2 + (f(x^n) - f(x^n+sigma e'))^2 ]
    """
    _, _, l_n, l_n1, l_n_p, l_n1_p = _asd_logits(
        head, fake_net, x0_n, ctx_n, x0_n1, ctx_n1, tape, sigma
    )
    s = l_n1 - l_n
    disc_adv = float(np.mean(_softplus(-s)))
    gen = float(np.mean(_softplus(s)))
    reg = 0.5 * float(np.mean((l_n1 - l_n1_p) ** 2 + (l_n - l_n_p) ** 2))
    return gen, disc_adv + lam * reg, reg


def asd_losses(
    head,
    fake_net: EpsNet,
    x0_n: np.ndarray,
    ctx_n: np.ndarray,
    x0_n1: np.ndarray,
    ctx_n1: np.ndarray,
    n: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    lam: float = 600.0,
    sigma: float = 0.05,
    exclude_last: bool = True,
) -> tuple[float, float, float]:
    """Draw one adversarial tape and return (gen_loss, disc_loss, reg)."""
    x0_n = np.atleast_2d(np.asarray(x0_n, dtype=np.float64))
    x0_n1 = np.atleast_2d(np.asarray(x0_n1, dtype=np.float64))
    if x0_n.shape != x0_n1.shape or x0_n.shape[0] == 0:
        raise ConfigurationError("pair batches must be nonempty and the same shape")
    tape = draw_asd_tape(rng, schedule, n, x0_n.shape[0], x0_n.shape[1], exclude_last)
    return asd_values_from_tape(head, fake_net, x0_n, ctx_n, x0_n1, ctx_n1, tape, lam, sigma)


def asd_disc_grad_from_tape(
    head,
    fake_net: EpsNet,
    x0_n: np.ndarray,
    ctx_n: np.ndarray,
    x0_n1: np.ndarray,
    ctx_n1: np.ndarray,
    tape: AsdTape,
    lam: float,
    sigma: float,
) -> tuple[np.ndarray, float, float, float]:
    """Head-parameter gradient of the discriminator loss, plus the three
    scalars. The backbone is read-only throughout."""
    t = tape.t
    x_t_n, x_t_n1, l_n, l_n1, l_n_p, l_n1_p = _asd_logits(
        head, fake_net, x0_n, ctx_n, x0_n1, ctx_n1, tape, sigma
    )
    m = x0_n.shape[0]
    s = l_n1 - l_n
    sig = _sigmoid(-s)  # -d/ds of log sigmoid(s)
    u_n1 = -sig / m + lam * (l_n1 - l_n1_p) / m
    u_n = sig / m + lam * (l_n - l_n_p) / m
    u_n1_p = -lam * (l_n1 - l_n1_p) / m
    u_n_p = -lam * (l_n - l_n_p) / m
    grads = critic_head_grad(head, fake_net, x_t_n1, t, ctx_n1, tape.n, u_n1)
    grads = grads + critic_head_grad(head, fake_net, x_t_n, t, ctx_n, tape.n, u_n)
    grads = grads + critic_head_grad(
        head, fake_net, x_t_n1 + sigma * tape.reg_eps_n1, t, ctx_n1, tape.n, u_n1_p
    )
    grads = grads + critic_head_grad(
        head, fake_net, x_t_n + sigma * tape.reg_eps_n, t, ctx_n, tape.n, u_n_p
    )
    disc_adv = float(np.mean(_softplus(-s)))
    gen = float(np.mean(_softplus(s)))
    reg = 0.5 * float(np.mean((l_n1 - l_n1_p) ** 2 + (l_n - l_n_p) ** 2))
    return grads, gen, disc_adv + lam * reg, reg


def asd_gen_upstream_from_tape(
    head,
    fake_net: EpsNet,
    x0_n: np.ndarray,
    ctx_n: np.ndarray,
    x0_n1: np.ndarray,
    ctx_n1: np.ndarray,
    tape: AsdTape,
) -> tuple[np.ndarray, float]:
    """Gradient of the generator-side loss w.r.t. the n-step predictions.

    The (n+1)-step branch is the gradient-blocked target; gradients reach the
    student only through the n-step noised samples. Returns the (M, D)
    upstream on x0_n and the loss value.
    """
    t = tape.t
    x_t_n = add_noise(x0_n, tape.eps_n, t)
    x_t_n1 = add_noise(x0_n1, tape.eps_n1, t)
    l_n = critic_logit(head, fake_net, x_t_n, t, ctx_n, tape.n)
    l_n1 = critic_logit(head, fake_net, x_t_n1, t, ctx_n1, tape.n)
    s = l_n - l_n1
    gen = float(np.mean(_softplus(-s)))
    m = x0_n.shape[0]
    u_logit = -_sigmoid(-s) / m
    dx = critic_input_grad(head, fake_net, x_t_n, t, ctx_n, tape.n, u_logit)
    return (1.0 - t) * dx, gen
