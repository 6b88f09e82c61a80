"""Inference: uniform few-step causal generation and the first-frame-enhanced
variant that spends more denoising steps on frame 1 than on later frames.

Noise draws are keyed by (seed, frame_index, step_index), so frames are
causally isolated streams: perturbing a later frame's stream cannot change
earlier frames, and the enhanced path degenerates bitwise to the uniform one
when both step counts coincide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .models import DenoiseTrajectory, StepRecord, StudentNet, as_predictor
from .rng import derive_rng
from .schedule import NoiseSchedule, add_noise
from .toyworld import FrameSequence

# stream tag separating generation draws from other uses of the same seed
_GEN_STREAM = 4242


@dataclass(frozen=True)
class InferencePlan:
    """Step allocation: `intensive` steps for frame 1, `reduced` for the rest.

    Both are prefixes of the same training schedule, so one step-unified
    model serves every plan.
    """

    schedule: NoiseSchedule
    intensive: int  # T
    reduced: int  # R
    length: int  # L

    def __post_init__(self):
        n = self.schedule.n_steps
        if not (1 <= self.reduced <= self.intensive <= n):
            raise ConfigurationError(
                f"need 1 <= reduced ({self.reduced}) <= intensive ({self.intensive}) <= {n}"
            )
        if self.length < 1:
            raise ConfigurationError(f"length must be >= 1, got {self.length}")

    def steps_for_frame(self, frame_index: int) -> int:
        return self.intensive if frame_index == 0 else self.reduced


def uniform_plan(schedule: NoiseSchedule, steps: int, length: int) -> InferencePlan:
    return InferencePlan(schedule, steps, steps, length)


def step_budget(plan: InferencePlan) -> int:
    """Total model evaluations for one video: T + (L-1) R."""
    return plan.intensive + (plan.length - 1) * plan.reduced


def generate_videos(
    source,
    plan: InferencePlan,
    seed: int,
    count: int,
    frame_dim: int | None = None,
) -> tuple[np.ndarray, DenoiseTrajectory]:
    """Generate `count` videos; returns frames (count, L, D) and trajectories.

    `source` is a StudentNet or a predictor callable(x_t, t, contexts, first).
    Videos are i.i.d. rows; each (frame, step) pair draws from its own derived
    stream.
    """
    predict = as_predictor(source)
    if frame_dim is None:
        if not isinstance(source, StudentNet):
            raise ConfigurationError("frame_dim is required for callable predictors")
        frame_dim = source.spec.frame_dim
    d = int(frame_dim)
    frames_out = np.empty((count, plan.length, d))
    context = np.zeros((count, d))
    trajectory: list[list[StepRecord]] = []
    for i in range(plan.length):
        k = plan.steps_for_frame(i)
        prefix = plan.schedule.prefix(k)
        x = derive_rng(seed, _GEN_STREAM, i, 0).standard_normal((count, d))
        records: list[StepRecord] = []
        x0 = None
        for j, t in enumerate(prefix):
            x0 = predict(x, t, context, i == 0)
            records.append(StepRecord(t, x, x0))
            if j + 1 < k:
                eps = derive_rng(seed, _GEN_STREAM, i, j + 1).standard_normal((count, d))
                x = add_noise(x0, eps, prefix[j + 1])
        frames_out[:, i] = x0
        context = x0
        trajectory.append(records)
    return frames_out, DenoiseTrajectory(trajectory, seed)


def generate_video(
    source, plan: InferencePlan, seed: int, frame_dim: int | None = None
) -> tuple[FrameSequence, DenoiseTrajectory]:
    """Single-video convenience wrapper around generate_videos."""
    frames, traj = generate_videos(source, plan, seed, 1, frame_dim)
    return FrameSequence(frames[0], seed), traj
