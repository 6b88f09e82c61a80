"""The four networks of the distillation loop, plus rollout machinery.

Nets share one input convention: [x_t, context, t, 1-t]. The teacher and
fake nets predict eps; the student predicts clean frames x0 (directly for
fresh students, via the clamped eps->x0 conversion when initialized from a
teacher); the discriminator head reads the fake net's backbone feature and
emits one logit per step index.

Rollouts record a replay tape (z, renoising draws, timesteps, context) so the
same stochastic generation becomes a deterministic function of the student
parameters for gradient checking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError
from .numerics import (
    MlpSpec,
    ParamVector,
    backward,
    backward_from_feature,
    mlp_forward,
    mlp_forward_with_feature,
    mlp_init,
)
from .schedule import add_noise

# eps->x0 conversion x0 = (x_t - t e)/(1 - t) is singular at t=1; clamp there.
CLAMP_T = 0.999


@dataclass(frozen=True)
class NetSpec:
    """Architecture shared by student/teacher/fake nets.

    With `eps_gate`, eps-style outputs are formed as t*x_t + (1-t)*mlp(...),
    anchoring the prediction to the exact pure-noise answer at t=1. Without
    it the conversion x0 = (x_t - t e)/(1 - t) multiplies the net's eps error
    by t/(1-t) (~1000 at the clamp), which makes few-step sampling from any
    imperfect net diverge.
    """

    frame_dim: int
    hidden: tuple[int, ...]
    skip: bool = True
    eps_gate: bool = True

    def __post_init__(self):
        if len(self.hidden) < 1:
            raise ConfigurationError("nets need at least one hidden layer")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def in_dim(self) -> int:
        return 2 * self.frame_dim + 2

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1]

    def mlp(self) -> MlpSpec:
        return MlpSpec(self.in_dim, self.hidden, self.frame_dim, self.skip)


@dataclass
class EpsNet:
    """eps-predicting net; its last hidden activation doubles as the
    discriminator backbone feature."""

    spec: NetSpec
    params: ParamVector


@dataclass
class StudentNet:
    """Clean-frame predictor. parameterization is "x0" (raw output) or "eps"
    (output converted through the clamped formula; used after teacher init)."""

    spec: NetSpec
    params: ParamVector
    parameterization: str = "x0"

    def __post_init__(self):
        if self.parameterization not in ("x0", "eps"):
            raise ConfigurationError(f"unknown parameterization {self.parameterization!r}")


@dataclass
class DiscriminatorHead:
    """Small MLP on the frozen backbone feature; one output logit per step."""

    spec: MlpSpec
    params: ParamVector

    @property
    def n_logits(self) -> int:
        return self.spec.out_dim


def make_eps_net(spec: NetSpec, rng: np.random.Generator) -> EpsNet:
    return EpsNet(spec, mlp_init(spec.mlp(), rng))


def make_student(spec: NetSpec, rng: np.random.Generator) -> StudentNet:
    return StudentNet(spec, mlp_init(spec.mlp(), rng), "x0")


def make_disc_head(
    feature_dim: int, hidden: tuple[int, ...], n_steps: int, rng: np.random.Generator
) -> DiscriminatorHead:
    spec = MlpSpec(feature_dim, tuple(hidden), n_steps, skip=False)
    return DiscriminatorHead(spec, mlp_init(spec, rng))


# -----------------------------------------------------------------------------
# Input packing
# -----------------------------------------------------------------------------


def net_inputs(x_t: np.ndarray, context: np.ndarray, t) -> np.ndarray:
    """Stack [x_t, context, t, 1-t] rows; t may be scalar or per-row."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    context = np.atleast_2d(np.asarray(context, dtype=np.float64))
    if context.shape[0] == 1 and x_t.shape[0] > 1:
        context = np.broadcast_to(context, x_t.shape)
    if context.shape != x_t.shape:
        raise ConfigurationError(f"context shape {context.shape} does not match x_t {x_t.shape}")
    b = x_t.shape[0]
    t_col = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)).reshape(b, 1)
    return np.concatenate([x_t, context, t_col, 1.0 - t_col], axis=1)


def eps_to_x0(x_t: np.ndarray, eps_hat: np.ndarray, t) -> np.ndarray:
    """Clamped conversion x0 = (x_t - t_c eps)/(1 - t_c), t_c = min(t, 0.999)."""
    t_c = np.minimum(np.asarray(t, dtype=np.float64), CLAMP_T)
    if np.asarray(x_t).ndim == 2 and t_c.ndim == 1:
        t_c = t_c[:, None]
    return (np.asarray(x_t, dtype=np.float64) - t_c * np.asarray(eps_hat)) / (1.0 - t_c)


# -----------------------------------------------------------------------------
# Forward passes
# -----------------------------------------------------------------------------


def eps_predict(
    net: EpsNet, x_t: np.ndarray, t, context: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(eps_hat, backbone feature) for a sample or batch."""
    squeeze = np.asarray(x_t).ndim == 1
    x2 = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    inputs = net_inputs(x2, context, t)
    out, feat = mlp_forward_with_feature(net.params, inputs, net.spec.mlp())
    if net.spec.eps_gate:
        t_col = np.broadcast_to(np.asarray(t, dtype=np.float64), (x2.shape[0],))[:, None]
        eps_hat = t_col * x2 + (1.0 - t_col) * out
    else:
        eps_hat = out
    return (eps_hat[0], feat[0]) if squeeze else (eps_hat, feat)


def student_predict_x0(net: StudentNet, x_t: np.ndarray, t, context: np.ndarray) -> np.ndarray:
    """Deterministic clean-frame prediction at noise level t."""
    squeeze = np.asarray(x_t).ndim == 1
    x2 = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    if net.parameterization == "x0":
        out = mlp_forward(net.params, net_inputs(x2, context, t), net.spec.mlp())
    else:
        t_c = np.minimum(np.broadcast_to(np.asarray(t, dtype=np.float64), (x2.shape[0],)), CLAMP_T)
        raw = mlp_forward(net.params, net_inputs(x2, context, t_c), net.spec.mlp())
        if net.spec.eps_gate:
            eps_hat = t_c[:, None] * x2 + (1.0 - t_c)[:, None] * raw
        else:
            eps_hat = raw
        out = eps_to_x0(x2, eps_hat, t_c)
    return out[0] if squeeze else out


def eps_net_backward(
    net: EpsNet, x_t: np.ndarray, t, context: np.ndarray, upstream_eps: np.ndarray
) -> np.ndarray:
    """Flat parameter gradient of <upstream_eps, eps_hat>, gate-aware."""
    x2 = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    u = np.atleast_2d(np.asarray(upstream_eps, dtype=np.float64))
    if net.spec.eps_gate:
        t_col = np.broadcast_to(np.asarray(t, dtype=np.float64), (x2.shape[0],))[:, None]
        u = (1.0 - t_col) * u
    grads, _ = backward(net.params, net_inputs(x2, context, t), net.spec.mlp(), u)
    return grads.values


def student_backward(
    net: StudentNet, x_t: np.ndarray, t, context: np.ndarray, upstream_x0: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of <upstream_x0, x0_prediction>.

    Returns (flat param gradient values summed over the batch, gradient
    w.r.t. the x_t slice of the input). Context and time inputs are treated
    as constants.
    """
    x2 = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    u = np.atleast_2d(np.asarray(upstream_x0, dtype=np.float64))
    d = net.spec.frame_dim
    if net.parameterization == "x0":
        grads, din = backward(net.params, net_inputs(x2, context, t), net.spec.mlp(), u)
        return grads.values, din[:, :d]
    t_c = np.minimum(np.broadcast_to(np.asarray(t, dtype=np.float64), (x2.shape[0],)), CLAMP_T)
    tc = t_c[:, None]
    if net.spec.eps_gate:
        # x0 = (1 + t) x - t * mlp: bounded sensitivities on both paths
        u_mlp = -tc * u
        grads, din = backward(net.params, net_inputs(x2, context, t_c), net.spec.mlp(), u_mlp)
        dx = din[:, :d] + (1.0 + tc) * u
    else:
        u_mlp = -(tc / (1.0 - tc)) * u
        grads, din = backward(net.params, net_inputs(x2, context, t_c), net.spec.mlp(), u_mlp)
        dx = din[:, :d] + u / (1.0 - tc)
    return grads.values, dx


def discriminator_logit(head: DiscriminatorHead, feature: np.ndarray, n: int) -> np.ndarray:
    """Logit n (1-based step index) of the head on a feature batch."""
    if not 1 <= n <= head.n_logits:
        raise DomainError(f"step index {n} outside 1..{head.n_logits}")
    squeeze = np.asarray(feature).ndim == 1
    logits = mlp_forward(head.params, np.atleast_2d(feature), head.spec)
    out = logits[:, n - 1]
    return float(out[0]) if squeeze else out


def critic_logit(
    head: DiscriminatorHead, fake_net: EpsNet, x_t: np.ndarray, t, context: np.ndarray, n: int
) -> np.ndarray:
    """f_psi at a noised sample: head logit n on the fake net's feature."""
    _, feat = eps_predict(fake_net, np.atleast_2d(x_t), t, context)
    return discriminator_logit(head, feat, n)


def critic_head_grad(
    head: DiscriminatorHead,
    fake_net: EpsNet,
    x_t: np.ndarray,
    t,
    context: np.ndarray,
    n: int,
    upstream: np.ndarray,
) -> np.ndarray:
    """d<upstream, logit_n>/d(head params); the backbone is never touched."""
    _, feat = eps_predict(fake_net, np.atleast_2d(x_t), t, context)
    u_full = np.zeros((feat.shape[0], head.n_logits))
    u_full[:, n - 1] = upstream
    grads, _ = backward(head.params, feat, head.spec, u_full)
    return grads.values


def critic_input_grad(
    head: DiscriminatorHead,
    fake_net: EpsNet,
    x_t: np.ndarray,
    t,
    context: np.ndarray,
    n: int,
    upstream: np.ndarray,
) -> np.ndarray:
    """d<upstream, logit_n>/d(x_t), flowing through the frozen backbone."""
    x2 = np.atleast_2d(x_t)
    inputs = net_inputs(x2, context, t)
    mlp = fake_net.spec.mlp()
    _, feat = mlp_forward_with_feature(fake_net.params, inputs, mlp)
    u_full = np.zeros((feat.shape[0], head.n_logits))
    u_full[:, n - 1] = upstream
    _, dfeat = backward(head.params, feat, head.spec, u_full)
    din = backward_from_feature(fake_net.params, inputs, mlp, dfeat)
    return din[:, : fake_net.spec.frame_dim]


# -----------------------------------------------------------------------------
# Rollouts: iterative predict-then-renoise generation with replay tapes
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class RolloutTape:
    """Everything random about one frame rollout, for exact replay."""

    timesteps: tuple[float, ...]
    z: np.ndarray  # (B, D) initial noise at t_1 = 1
    renoise_eps: np.ndarray  # (n-1, B, D)
    context: np.ndarray  # (B, D), gradient-blocked


@dataclass(frozen=True)
class StepRecord:
    """State before one denoising step and the prediction it produced."""

    t: float
    x_noisy: np.ndarray  # (B, D)
    x0_pred: np.ndarray  # (B, D)


def draw_rollout_tape(
    rng: np.random.Generator, timesteps: tuple[float, ...], context: np.ndarray
) -> RolloutTape:
    ts = tuple(float(t) for t in timesteps)
    if len(ts) < 1 or ts[0] != 1.0:
        raise ConfigurationError(f"rollout timesteps must start at 1.0, got {ts}")
    ctx = np.atleast_2d(np.asarray(context, dtype=np.float64))
    b, d = ctx.shape
    z = rng.standard_normal((b, d))
    renoise = rng.standard_normal((max(len(ts) - 1, 0), b, d))
    return RolloutTape(ts, z, renoise, ctx)


def rollout_from_tape(net: StudentNet, tape: RolloutTape) -> tuple[np.ndarray, list[StepRecord]]:
    """Replay an n-step rollout: deterministic in (params, tape)."""
    ts = tape.timesteps
    x = tape.z
    records = []
    x0 = None
    for j, t in enumerate(ts):
        x0 = student_predict_x0(net, x, t, tape.context)
        records.append(StepRecord(t, x, x0))
        if j + 1 < len(ts):
            x = add_noise(x0, tape.renoise_eps[j], ts[j + 1])
    return x0, records


def rollout_frame(
    net: StudentNet,
    timesteps: tuple[float, ...],
    context: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[StepRecord], RolloutTape]:
    """n-step generation of one frame from fresh noise.

    Returns the final clean prediction, the per-step trajectory records,
    and the replay tape.
    """
    tape = draw_rollout_tape(rng, timesteps, context)
    x0, records = rollout_from_tape(net, tape)
    squeeze = np.asarray(context).ndim == 1
    if squeeze:
        x0 = x0[0]
    return x0, records, tape


def rollout_backward(net: StudentNet, tape: RolloutTape, upstream: np.ndarray) -> np.ndarray:
    """Backprop <upstream, final x0> through the whole predict/renoise chain.

    Gradient flows through every student call via the renoising steps
    (d x_{j+1} / d x0_j = (1 - t_{j+1}) I); the renoising draws and the
    context are constants from the tape.
    """
    _, records = rollout_from_tape(net, tape)
    ts = tape.timesteps
    total = np.zeros(net.params.size)
    delta = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    for j in range(len(ts) - 1, -1, -1):
        g, dx = student_backward(net, records[j].x_noisy, ts[j], tape.context, delta)
        total += g
        if j > 0:
            delta = (1.0 - ts[j]) * dx
    return total


@dataclass
class DenoiseTrajectory:
    """Per-frame record of every intermediate clean-frame prediction.

    frames[i][j] is the batched StepRecord for frame i at denoising step j;
    step counts may differ between frames (first-frame-enhanced inference).
    """

    frames: list[list[StepRecord]]
    seed: int

    def step_counts(self) -> list[int]:
        return [len(steps) for steps in self.frames]

    def n_frames(self) -> int:
        return len(self.frames)


def analytic_x0_predictor(world_spec):
    """Posterior-mean predictor from the closed-form world (oracle teacher).

    Uses the same clamped eps->x0 conversion as net-based prediction, so the
    only difference from a trained teacher is the eps error.
    """
    from .toyworld import analytic_eps_batch

    def predict(x_t, t, contexts, first):
        x2 = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        t_c = np.minimum(np.broadcast_to(np.asarray(t, dtype=np.float64), (x2.shape[0],)), CLAMP_T)
        eps_star = analytic_eps_batch(world_spec, x2, t_c, contexts, first)
        return eps_to_x0(x2, eps_star, t_c)

    return predict


def as_predictor(source):
    """Normalize a StudentNet or callable into predict(x_t, t, ctx, first)."""
    if isinstance(source, StudentNet):

        def predict(x_t, t, contexts, first):
            return student_predict_x0(source, x_t, t, contexts)

        return predict
    if callable(source):
        return source
    raise ConfigurationError(f"cannot interpret predictor {source!r}")


# -----------------------------------------------------------------------------
# Causal sequence rollouts (self-generated context, one tape per frame)
# -----------------------------------------------------------------------------


@dataclass
class SequenceRollout:
    """A batch of causally generated sequences.

    frames[i] holds the replay tape and final predictions for frame i; frame
    i's context is frame i-1's prediction (zero vector for frame 1). Flattened
    views are frame-major: rows [frame0 batch, frame1 batch, ...].
    """

    tapes: list[RolloutTape]
    x0s: list[np.ndarray]  # (B, D) per frame

    @property
    def n_frames(self) -> int:
        return len(self.tapes)

    @property
    def batch(self) -> int:
        return self.x0s[0].shape[0]

    def x0_flat(self) -> np.ndarray:
        return np.concatenate(self.x0s, axis=0)

    def contexts_flat(self) -> np.ndarray:
        return np.concatenate([tape.context for tape in self.tapes], axis=0)

    def first_flat(self) -> np.ndarray:
        flags = np.zeros(self.n_frames * self.batch, dtype=bool)
        flags[: self.batch] = True
        return flags


def rollout_sequences(
    net: StudentNet,
    timesteps: tuple[float, ...],
    length: int,
    batch: int,
    rng: np.random.Generator,
) -> SequenceRollout:
    """Generate `batch` sequences of `length` frames, conditioning each frame
    on the student's own previous prediction (gradient-blocked)."""
    d = net.spec.frame_dim
    context = np.zeros((batch, d))
    tapes, x0s = [], []
    for _ in range(length):
        tape = draw_rollout_tape(rng, timesteps, context)
        x0, _ = rollout_from_tape(net, tape)
        tapes.append(tape)
        x0s.append(x0)
        context = x0
    return SequenceRollout(tapes, x0s)


def sequence_backward(net: StudentNet, roll: SequenceRollout, upstream_flat: np.ndarray) -> np.ndarray:
    """Backprop a frame-major (L*B, D) upstream through every frame's rollout."""
    b = roll.batch
    u = np.asarray(upstream_flat, dtype=np.float64)
    if u.shape != (roll.n_frames * b, net.spec.frame_dim):
        raise ConfigurationError(f"upstream shape {u.shape} does not match rollout")
    total = np.zeros(net.params.size)
    for i, tape in enumerate(roll.tapes):
        total += rollout_backward(net, tape, u[i * b : (i + 1) * b])
    return total


# -----------------------------------------------------------------------------
# Initialization chain
# -----------------------------------------------------------------------------


def init_student_from_teacher(teacher: EpsNet) -> StudentNet:
    """Student whose x0 predictions equal the converted teacher exactly.

    Copies the teacher parameters and switches the student to the eps
    parameterization, so one-step samples coincide bit for bit at init.
    """
    return StudentNet(teacher.spec, teacher.params.copy(), "eps")


def clone_eps_net(net: EpsNet) -> EpsNet:
    return EpsNet(net.spec, net.params.copy())


# -----------------------------------------------------------------------------
# Net-level checkpoint I/O (role-tagged wrappers over the raw format)
# -----------------------------------------------------------------------------


def _net_meta(spec: NetSpec, role: str, extra: dict | None) -> dict:
    meta = {
        "role": role,
        "frame_dim": spec.frame_dim,
        "hidden": list(spec.hidden),
        "skip": spec.skip,
        "eps_gate": spec.eps_gate,
    }
    if extra:
        meta.update(extra)
    return meta


def save_student(path: str, net: StudentNet, extra: dict | None = None) -> None:
    from .numerics import save_checkpoint

    meta = _net_meta(net.spec, "student", extra)
    meta["parameterization"] = net.parameterization
    save_checkpoint(path, net.params, meta)


def save_eps_net(path: str, net: EpsNet, role: str, extra: dict | None = None) -> None:
    from .numerics import save_checkpoint

    if role not in ("teacher", "fake"):
        raise ConfigurationError(f"eps net role must be teacher or fake, got {role!r}")
    save_checkpoint(path, net.params, _net_meta(net.spec, role, extra))


def save_disc_head(path: str, head: DiscriminatorHead, extra: dict | None = None) -> None:
    from .numerics import save_checkpoint

    meta = {
        "role": "disc_head",
        "feature_dim": head.spec.in_dim,
        "hidden": list(head.spec.hidden),
        "n_logits": head.spec.out_dim,
    }
    if extra:
        meta.update(extra)
    save_checkpoint(path, head.params, meta)


def _load_net_spec(meta: dict) -> NetSpec:
    return NetSpec(
        int(meta["frame_dim"]),
        tuple(meta["hidden"]),
        bool(meta["skip"]),
        bool(meta.get("eps_gate", True)),
    )


def load_student(path: str) -> tuple[StudentNet, dict]:
    from .numerics import load_checkpoint

    params, meta = load_checkpoint(path)
    if meta.get("role") != "student":
        raise ConfigurationError(f"{path}: expected a student checkpoint, got {meta.get('role')!r}")
    return StudentNet(_load_net_spec(meta), params, meta["parameterization"]), meta


def load_eps_net(path: str, role: str | None = None) -> tuple[EpsNet, dict]:
    from .numerics import load_checkpoint

    params, meta = load_checkpoint(path)
    if meta.get("role") not in ("teacher", "fake"):
        raise ConfigurationError(f"{path}: not an eps-net checkpoint ({meta.get('role')!r})")
    if role is not None and meta["role"] != role:
        raise ConfigurationError(f"{path}: expected role {role!r}, got {meta['role']!r}")
    return EpsNet(_load_net_spec(meta), params), meta


def load_disc_head(path: str) -> tuple[DiscriminatorHead, dict]:
    from .numerics import load_checkpoint

    params, meta = load_checkpoint(path)
    if meta.get("role") != "disc_head":
        raise ConfigurationError(f"{path}: expected a disc_head checkpoint")
    spec = MlpSpec(int(meta["feature_dim"]), tuple(meta["hidden"]), int(meta["n_logits"]), False)
    return DiscriminatorHead(spec, params), meta


# -----------------------------------------------------------------------------
# Score sources for distribution matching
# -----------------------------------------------------------------------------


def net_score_fn(net: EpsNet):
    """Score estimate -eps_hat / t from an eps net (gradient-blocked use)."""

    def score(x_t, t, contexts, first):
        t_col = np.broadcast_to(np.asarray(t, dtype=np.float64), (np.atleast_2d(x_t).shape[0],))
        eps_hat, _ = eps_predict(net, x_t, t_col, contexts)
        return -eps_hat / t_col[:, None]

    return score


def analytic_score_fn(world_spec):
    """Closed-form world score (used as oracle teacher)."""
    from .toyworld import analytic_score_batch

    def score(x_t, t, contexts, first):
        return analytic_score_batch(world_spec, x_t, t, contexts, first)

    return score


def as_score_fn(source, world_spec=None):
    """Normalize an EpsNet / callable / "analytic" marker into a score fn."""
    if isinstance(source, EpsNet):
        return net_score_fn(source)
    if source == "analytic":
        if world_spec is None:
            raise ConfigurationError("analytic score source needs a world spec")
        return analytic_score_fn(world_spec)
    if callable(source):
        return source
    raise ConfigurationError(f"cannot interpret score source {source!r}")
