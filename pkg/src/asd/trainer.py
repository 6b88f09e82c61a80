"""End-to-end distillation: teacher pretraining, the initialization chain, and
the alternating generator / fake-score / discriminator loop at ratio 1:4:1.

One macro-iteration performs `update_ratio` = (gen, fake, disc) optimizer
steps on fresh batches each. The generator update samples one pair index
n in {1..N-1}, rolls out n-step and (n+1)-step sequence batches with
independent noise, and combines the distribution-matching gradient (on the
n-step rollout) with the weighted adversarial self-alignment gradient.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigurationError, NumericError
from .losses import (
    LossBreakdown,
    asd_disc_grad_from_tape,
    asd_gen_upstream_from_tape,
    dmd_from_tape,
    draw_asd_tape,
    draw_dmd_tape,
    draw_fake_tape,
    fake_score_grad_from_tape,
    total_generator_loss,
)
from .models import (
    DiscriminatorHead,
    EpsNet,
    NetSpec,
    StudentNet,
    analytic_score_fn,
    clone_eps_net,
    eps_predict,
    init_student_from_teacher,
    make_disc_head,
    make_eps_net,
    make_student,
    net_inputs,
    net_score_fn,
    rollout_sequences,
    save_disc_head,
    save_eps_net,
    save_student,
    sequence_backward,
)
from .numerics import AdamState, adam_update, backward
from .rng import derive_rng
from .schedule import NoiseSchedule, add_noise, make_schedule
from .toyworld import (
    WorldSpec,
    analytic_eps_batch,
    default_world,
    sample_sequences,
    world_to_kv,
)

LOG_COLUMNS = (
    "iteration",
    "dmd",
    "asd_gen",
    "asd_disc",
    "reg",
    "fake_score",
    "total_gen",
    "n",
    "t",
)

# rng stream tags
_S_TEACHER_DATA = 21
_S_INIT = 22
_S_GEN = 23
_S_FAKE = 24
_S_DISC = 25


@dataclass(frozen=True)
class DistillConfig:
    """Every knob of the pipeline; defaults mirror the reference setup where
    one transfers (batch 8, 3000 iterations, 4 steps, ratio 1:4:1, lambda 600,
    sigma 0.05) and stay desk-scale everywhere else."""

    # world
    world_dim: int = 8
    world_len: int = 8
    world_transition_scale: float = 0.9
    world_noise_scale: float = 0.19
    world_seed: int = 0
    # schedule
    n_steps: int = 4
    timesteps: str = ""  # optional explicit comma list overriding n_steps
    # loss weights
    alpha: float = 1.0
    lambda_reg: float = 600.0
    sigma_perturb: float = 0.05
    asd_active: bool = True
    asd_exclude_last_t: bool = True
    dmd_normalize: bool = False
    # architectures
    hidden: tuple[int, ...] = (64, 64)
    disc_hidden: tuple[int, ...] = (64,)
    linear_skip: bool = True
    eps_gate: bool = True
    # distillation loop
    iterations: int = 3000
    batch_size: int = 8
    update_ratio: tuple[int, int, int] = (1, 4, 1)
    lr_student: float = 2e-4
    lr_fake: float = 1e-3
    lr_disc: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    chunk_size: int = 1
    checkpoint_every: int = 200
    seed: int = 0
    # teacher
    teacher_mode: str = "learned"  # learned | analytic
    teacher_iterations: int = 8000
    teacher_batch: int = 16
    lr_teacher: float = 2e-3
    teacher_seed: int = 100

    def __post_init__(self):
        object.__setattr__(self, "hidden", _as_int_tuple(self.hidden))
        object.__setattr__(self, "disc_hidden", _as_int_tuple(self.disc_hidden))
        object.__setattr__(self, "update_ratio", _as_int_tuple(self.update_ratio))
        if len(self.update_ratio) != 3 or any(r < 1 for r in self.update_ratio):
            raise ConfigurationError(f"update_ratio must be three entries >= 1: {self.update_ratio}")
        if self.teacher_mode not in ("learned", "analytic"):
            raise ConfigurationError(f"teacher_mode must be learned or analytic: {self.teacher_mode}")
        if self.chunk_size < 1:
            raise ConfigurationError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if self.asd_active and self.resolved_schedule().n_steps < 2:
            raise ConfigurationError("adversarial self-alignment needs at least 2 steps")

    def resolved_schedule(self) -> NoiseSchedule:
        if self.timesteps:
            return NoiseSchedule.parse(self.timesteps)
        return make_schedule(self.n_steps)

    def build_world(self) -> WorldSpec:
        return default_world(
            dim=self.world_dim,
            length=self.world_len,
            transition_scale=self.world_transition_scale,
            noise_scale=self.world_noise_scale,
            seed=self.world_seed,
        )

    def net_spec(self) -> NetSpec:
        return NetSpec(self.world_dim, self.hidden, self.linear_skip, self.eps_gate)

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                out[f.name] = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                out[f.name] = "true" if v else "false"
            else:
                out[f.name] = str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "DistillConfig":
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in kv.items():
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            kwargs[key] = _parse_field(known[key], raw)
        return cls(**kwargs)


def _as_int_tuple(v) -> tuple[int, ...]:
    if isinstance(v, str):
        v = [p for p in v.split(",") if p.strip()]
    return tuple(int(x) for x in v)


def _parse_field(f, raw: str):
    raw = raw.strip()
    if f.type in ("int",):
        return int(raw)
    if f.type in ("float",):
        return float(raw)
    if f.type in ("bool",):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"cannot parse boolean {f.name} = {raw!r}")
    if f.type.startswith("tuple"):
        return _as_int_tuple(raw)
    return raw


# -----------------------------------------------------------------------------
# Teacher pretraining (denoising regression on real world data)
# -----------------------------------------------------------------------------


def _frames_with_contexts(batch: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten (B, L, D) sequences into frame-major (x0, context, first) rows."""
    b, length, d = batch.shape
    x0 = np.swapaxes(batch, 0, 1).reshape(length * b, d)
    ctx = np.concatenate([np.zeros((b, d)), np.swapaxes(batch[:, :-1], 0, 1).reshape((length - 1) * b, d)])
    first = np.zeros(length * b, dtype=bool)
    first[:b] = True
    return x0, ctx, first


def train_teacher(world: WorldSpec, config: DistillConfig) -> EpsNet:
    """Fit the eps net on fresh world samples at continuous-uniform t."""
    spec = NetSpec(world.dim, config.hidden, config.linear_skip, config.eps_gate)
    net = make_eps_net(spec, derive_rng(config.teacher_seed, _S_INIT))
    opt = AdamState.zeros(net.params.size)
    rng = derive_rng(config.teacher_seed, _S_TEACHER_DATA)
    mlp = spec.mlp()
    for it in range(config.teacher_iterations):
        batch = sample_sequences(world, rng, config.teacher_batch)
        x0, ctx, _ = _frames_with_contexts(batch)
        m = x0.shape[0]
        t = 1.0 - rng.random(m)  # uniform on (0, 1]
        eps = rng.standard_normal((m, world.dim))
        x_t = add_noise(x0, eps, t)
        eps_hat, _ = eps_predict(net, x_t, t, ctx)
        resid = eps_hat - eps
        loss = float(np.mean(np.sum(resid**2, axis=1)))
        if not math.isfinite(loss):
            raise NumericError("teacher loss diverged", {"iteration": it})
        grads, _ = backward(net.params, net_inputs(x_t, ctx, t), mlp, 2.0 * resid / m)
        net.params, opt = adam_update(
            net.params, grads, opt, config.lr_teacher, config.adam_beta1,
            config.adam_beta2, config.adam_eps,
        )
    return net


def teacher_heldout_mse(net: EpsNet, world: WorldSpec, count: int = 2000, seed: int = 9) -> float:
    """Mean squared gap to the closed-form optimal eps on held-out points."""
    rng = derive_rng(seed, 31)
    batch = sample_sequences(world, rng, max(count // world.length, 1))
    x0, ctx, first = _frames_with_contexts(batch)
    m = x0.shape[0]
    t = 1.0 - rng.random(m)
    eps = rng.standard_normal((m, world.dim))
    x_t = add_noise(x0, eps, t)
    eps_hat, _ = eps_predict(net, x_t, t, ctx)
    eps_star = analytic_eps_batch(world, x_t, t, ctx, first)
    return float(np.mean(np.sum((eps_hat - eps_star) ** 2, axis=1)))


# -----------------------------------------------------------------------------
# Distillation state and the alternating update
# -----------------------------------------------------------------------------


@dataclass
class TrainState:
    iteration: int
    student: StudentNet
    student_opt: AdamState
    fake: EpsNet
    fake_opt: AdamState
    head: DiscriminatorHead
    head_opt: AdamState
    rng_gen: np.random.Generator
    rng_fake: np.random.Generator
    rng_disc: np.random.Generator
    counters: dict = field(default_factory=lambda: {"gen": 0, "fake": 0, "disc": 0})
    n_history: list = field(default_factory=list)
    last_n: int = 0
    last_t: float = float("nan")


def init_train_state(
    config: DistillConfig, world: WorldSpec, schedule: NoiseSchedule, teacher: EpsNet | None
) -> TrainState:
    spec = NetSpec(world.dim, config.hidden, config.linear_skip, config.eps_gate)
    if teacher is not None:
        student = init_student_from_teacher(teacher)
        fake = clone_eps_net(teacher)
    else:
        # analytic mode has no net teacher to copy; start from random nets
        student = make_student(spec, derive_rng(config.seed, _S_INIT, 1))
        fake = make_eps_net(spec, derive_rng(config.seed, _S_INIT, 2))
    head = make_disc_head(
        spec.feature_dim, config.disc_hidden, schedule.n_steps, derive_rng(config.seed, _S_INIT, 3)
    )
    return TrainState(
        iteration=0,
        student=student,
        student_opt=AdamState.zeros(student.params.size),
        fake=fake,
        fake_opt=AdamState.zeros(fake.params.size),
        head=head,
        head_opt=AdamState.zeros(head.params.size),
        rng_gen=derive_rng(config.seed, _S_GEN),
        rng_fake=derive_rng(config.seed, _S_FAKE),
        rng_disc=derive_rng(config.seed, _S_DISC),
    )


def _draw_pair_index(rng: np.random.Generator, n_steps: int) -> int:
    """Pair index n with n+1 still on the schedule; degenerate N=1 uses n=1."""
    if n_steps == 1:
        return 1
    return int(rng.integers(1, n_steps))


def distill_step(
    state: TrainState,
    config: DistillConfig,
    world: WorldSpec,
    schedule: NoiseSchedule,
    data_score,
) -> LossBreakdown:
    """One macro-iteration: gen, fake, disc updates at the configured ratio."""
    length, batch = world.length, config.batch_size
    big_n = schedule.n_steps
    gen_r, fake_r, disc_r = config.update_ratio
    gen_score = net_score_fn(state.fake)

    dmd_val = asd_gen_val = float("nan")
    asd_disc_val = reg_val = float("nan")
    t_logged = float("nan")
    n = 1

    # --- generator updates (distribution matching + weighted self-alignment)
    for _ in range(gen_r):
        n = _draw_pair_index(state.rng_gen, big_n)
        if config.asd_active and n >= big_n:
            raise ConfigurationError("pair index reached the final step with ASD active")
        roll_n = rollout_sequences(state.student, schedule.prefix(n), length, batch, state.rng_gen)
        dmd_tape = draw_dmd_tape(
            state.rng_gen, schedule, length, batch, world.dim, config.chunk_size
        )
        grad_values, dmd_val, _ = dmd_from_tape(
            state.student, data_score, gen_score, roll_n, dmd_tape, config.dmd_normalize
        )
        if config.asd_active:
            roll_n1 = rollout_sequences(
                state.student, schedule.prefix(n + 1), length, batch, state.rng_gen
            )
            asd_tape = draw_asd_tape(
                state.rng_gen, schedule, n, length * batch, world.dim, config.asd_exclude_last_t
            )
            upstream, asd_gen_val = asd_gen_upstream_from_tape(
                state.head,
                state.fake,
                roll_n.x0_flat(),
                roll_n.contexts_flat(),
                roll_n1.x0_flat(),
                roll_n1.contexts_flat(),
                asd_tape,
            )
            t_logged = asd_tape.t
            grad_values = grad_values + config.alpha * sequence_backward(
                state.student, roll_n, upstream
            )
        grads = state.student.params.with_values(grad_values)
        state.student.params, state.student_opt = adam_update(
            state.student.params, grads, state.student_opt, config.lr_student,
            config.adam_beta1, config.adam_beta2, config.adam_eps,
        )
        state.counters["gen"] += 1
        state.n_history.append(n)

    # --- fake-score updates on fresh student rollouts
    fake_losses = []
    for _ in range(fake_r):
        n_fake = 1 if big_n == 1 else int(state.rng_fake.integers(1, big_n + 1))
        roll = rollout_sequences(
            state.student, schedule.prefix(n_fake), length, batch, state.rng_fake
        )
        tape = draw_fake_tape(state.rng_fake, schedule, length, batch, world.dim, config.chunk_size)
        grad_values, loss = fake_score_grad_from_tape(
            state.fake, roll.x0_flat(), roll.contexts_flat(), tape
        )
        state.fake.params, state.fake_opt = adam_update(
            state.fake.params, state.fake.params.with_values(grad_values), state.fake_opt,
            config.lr_fake, config.adam_beta1, config.adam_beta2, config.adam_eps,
        )
        fake_losses.append(loss)
        state.counters["fake"] += 1
    fake_val = float(np.mean(fake_losses)) if fake_losses else float("nan")

    # --- discriminator updates (head only; the backbone is frozen)
    if config.asd_active:
        for _ in range(disc_r):
            roll_n = rollout_sequences(
                state.student, schedule.prefix(n), length, batch, state.rng_disc
            )
            roll_n1 = rollout_sequences(
                state.student, schedule.prefix(n + 1), length, batch, state.rng_disc
            )
            tape = draw_asd_tape(
                state.rng_disc, schedule, n, length * batch, world.dim, config.asd_exclude_last_t
            )
            grad_values, _, asd_disc_val, reg_val = asd_disc_grad_from_tape(
                state.head,
                state.fake,
                roll_n.x0_flat(),
                roll_n.contexts_flat(),
                roll_n1.x0_flat(),
                roll_n1.contexts_flat(),
                tape,
                config.lambda_reg,
                config.sigma_perturb,
            )
            state.head.params, state.head_opt = adam_update(
                state.head.params, state.head.params.with_values(grad_values), state.head_opt,
                config.lr_disc, config.adam_beta1, config.adam_beta2, config.adam_eps,
            )
            state.counters["disc"] += 1

    state.iteration += 1
    breakdown = LossBreakdown(
        dmd=dmd_val,
        asd_gen=asd_gen_val,
        asd_disc=asd_disc_val,
        reg=reg_val,
        fake_score=fake_val,
        total_gen=total_generator_loss(dmd_val, asd_gen_val, config.alpha, config.asd_active),
        alpha=config.alpha,
        lambda_reg=config.lambda_reg,
        sigma_perturb=config.sigma_perturb,
    )
    must_be_finite = [breakdown.dmd, breakdown.fake_score, breakdown.total_gen]
    if config.asd_active:
        must_be_finite += [breakdown.asd_gen, breakdown.asd_disc, breakdown.reg]
    if not all(math.isfinite(v) for v in must_be_finite):
        raise NumericError(
            "non-finite loss", {"iteration": state.iteration, "breakdown": vars(breakdown)}
        )
    state.last_n = n
    state.last_t = t_logged
    return breakdown


# -----------------------------------------------------------------------------
# Full runs
# -----------------------------------------------------------------------------


@dataclass
class DistillResult:
    config: DistillConfig
    world: WorldSpec
    schedule: NoiseSchedule
    teacher: EpsNet | None
    student: StudentNet
    fake: EpsNet
    head: DiscriminatorHead
    state: TrainState
    log_rows: list[dict]


def _log_row(iteration: int, b: LossBreakdown, n: int, t: float) -> dict:
    return {
        "iteration": iteration,
        "dmd": b.dmd,
        "asd_gen": b.asd_gen,
        "asd_disc": b.asd_disc,
        "reg": b.reg,
        "fake_score": b.fake_score,
        "total_gen": b.total_gen,
        "n": n,
        "t": t,
    }


def write_train_log(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt_cell(row[k]) for k in LOG_COLUMNS})


def _fmt_cell(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def run_distillation(
    config: DistillConfig,
    out_dir: str | None = None,
    teacher: EpsNet | None = None,
) -> DistillResult:
    """Execute the full pipeline; optionally write checkpoints and the log.

    A pre-trained teacher may be supplied to share it across runs; otherwise
    learned mode trains one and analytic mode uses the closed-form score.
    """
    world = config.build_world()
    schedule = config.resolved_schedule()
    if config.teacher_mode == "learned":
        if teacher is None:
            teacher = train_teacher(world, config)
        data_score = net_score_fn(teacher)
    else:
        teacher = None
        data_score = analytic_score_fn(world)

    state = init_train_state(config, world, schedule, teacher)
    extra_meta = {"timesteps": list(schedule.timesteps), "world": world_to_kv(world)}
    rows: list[dict] = []
    ckpt_dir = os.path.join(out_dir, "checkpoints") if out_dir else None
    for it in range(1, config.iterations + 1):
        breakdown = distill_step(state, config, world, schedule, data_score)
        rows.append(_log_row(it, breakdown, state.last_n, state.last_t))
        if ckpt_dir and config.checkpoint_every > 0 and it % config.checkpoint_every == 0:
            save_student(
                os.path.join(ckpt_dir, f"student_{it:06d}.ckpt"), state.student, extra_meta
            )

    result = DistillResult(
        config, world, schedule, teacher, state.student, state.fake, state.head, state, rows
    )
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_student(os.path.join(out_dir, "student.ckpt"), state.student, extra_meta)
        if teacher is not None:
            save_eps_net(os.path.join(out_dir, "teacher.ckpt"), teacher, "teacher", extra_meta)
        save_eps_net(os.path.join(out_dir, "fake.ckpt"), state.fake, "fake", extra_meta)
        save_disc_head(os.path.join(out_dir, "disc.ckpt"), state.head, extra_meta)
        write_train_log(os.path.join(out_dir, "train_log.csv"), rows)
    return result
