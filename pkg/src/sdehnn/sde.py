"""Euler–Maruyama simulation of a neural SDE on a hidden state.

Two update rules are provided:

* ``standard``:  z' = z + f(z) dt + g(z) * sqrt(dt) W
* ``bernoulli``: z' = z + f(z) dt + (m * g(z)) * sqrt(dt) W, where ``m`` is a
  fresh inverted-dropout mask drawn at every step.

Randomness comes from a :class:`BrownianSource`, which derives an independent
stream for every ``(sample, step)`` pair from one master seed. The same pair
always yields the same draws, whatever order the pairs are evaluated in.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, DimensionError, NumericError
from .layers import DropoutMask, check_drop_probability, sample_mask

MODES = ("standard", "bernoulli")

# stream tags keep the Brownian, mask and bookkeeping draws disjoint
BROWNIAN = 0
MASK = 1


@dataclass(frozen=True)
class SdeConfig:
    """Solver settings. ``terminal_time == 0`` means zero Euler steps (plain HNN)."""

    terminal_time: float = 3.0
    step_size: float = 0.5
    mode: str = "standard"
    mask_probability: float = 0.0
    record_trajectory: bool = False

    def __post_init__(self):
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if self.terminal_time < 0:
            raise ConfigError(f"terminal_time must be >= 0, got {self.terminal_time}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        check_drop_probability(self.mask_probability)
        steps = round(self.terminal_time / self.step_size)
        if self.terminal_time > 0 and steps < 1:
            raise ConfigError(
                f"terminal_time {self.terminal_time} is shorter than half a step of {self.step_size}")
        if abs(steps * self.step_size - self.terminal_time) > 1e-9 * max(1.0, self.terminal_time):
            raise ConfigError(
                f"terminal_time {self.terminal_time} is not a multiple of step_size {self.step_size}")

    @property
    def steps(self) -> int:
        return round(self.terminal_time / self.step_size)

    @classmethod
    def from_steps(cls, steps: int, step_size: float, **kw) -> "SdeConfig":
        if steps < 0:
            raise ConfigError(f"steps must be >= 0, got {steps}")
        return cls(terminal_time=steps * step_size, step_size=step_size, **kw)


class BrownianSource:
    """Reproducible Gaussian increments keyed by (sample, step).

    ``stream`` separates independent uses of one master seed (training,
    validation and evaluation passes never share draws).
    """

    def __init__(self, master_seed: int, stream: int = 0):
        if master_seed < 0 or stream < 0:
            raise ConfigError(f"seed and stream must be non-negative, got {master_seed}, {stream}")
        self.master_seed = int(master_seed)
        self.stream = int(stream)

    def generator(self, tag: int, *keys: int) -> np.random.Generator:
        return np.random.default_rng([self.master_seed, self.stream, tag, *(int(k) for k in keys)])

    def increment(self, sample: int, step: int, dim: int, dt: float, batch: int = 1) -> Tensor:
        """sqrt(dt) * W with W ~ N(0, I), shape ``(dim, batch)``."""
        if dt <= 0:
            raise ConfigError(f"dt must be > 0, got {dt}")
        w = self.generator(BROWNIAN, sample, step).standard_normal((dim, batch))
        return Tensor(math.sqrt(dt) * w)

    def mask(self, sample: int, step: int, shape: tuple, p: float) -> DropoutMask:
        return sample_mask(shape, p, self.generator(MASK, sample, step), seed=(self.master_seed, sample, step))


def brownian_increment(source: BrownianSource, sample: int, step: int, dim: int, dt: float) -> Tensor:
    return source.increment(sample, step, dim, dt)


def _same_shape(*tensors: Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise DimensionError(f"Euler step operands disagree in shape: {[x.shape for x in tensors]}")


def euler_step(z: Tensor, drift_value: Tensor, diffusion_value: Tensor, dt: float,
               increment: Tensor) -> Tensor:
    _same_shape(z, drift_value, diffusion_value, increment)
    return z + drift_value * dt + diffusion_value * increment


def euler_step_bernoulli(z: Tensor, drift_value: Tensor, diffusion_value: Tensor, dt: float,
                         increment: Tensor, mask: DropoutMask) -> Tensor:
    _same_shape(z, drift_value, diffusion_value, increment)
    return euler_step(z, drift_value, mask.apply(diffusion_value), dt, increment)


@dataclass
class Trajectory:
    """Hidden states z_0 ... z_steps as arrays (copies, detached from any tape)."""

    states: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, k):
        return self.states[k]


def solve(z0: Tensor, drift: Callable[[Tensor], Tensor], diffusion: Callable[[Tensor], Tensor],
          config: SdeConfig, source: BrownianSource, sample: int = 0):
    """Integrate from ``z0`` to the terminal time.

    Returns ``(z_T, trajectory)``; ``trajectory`` is None unless
    ``config.record_trajectory``. When called under an active tape the whole
    path is recorded, so gradients reach the parameters of ``drift`` and
    ``diffusion``. Brownian increments and masks are constants.
    """
    dt = config.step_size
    trajectory = Trajectory([z0.data.copy()]) if config.record_trajectory else None
    bernoulli = config.mode == "bernoulli"
    z = z0
    for k in range(config.steps):
        try:
            f_z = drift(z)
            g_z = diffusion(z)
            inc = source.increment(sample, k, z.rows, dt, batch=z.cols)
            if bernoulli:
                mask = source.mask(sample, k, g_z.shape, config.mask_probability)
                z = euler_step_bernoulli(z, f_z, g_z, dt, inc, mask)
            else:
                z = euler_step(z, f_z, g_z, dt, inc)
        except NumericError as exc:
            raise NumericError(f"non-finite state at Euler step {k}: {exc}") from exc
        if trajectory is not None:
            trajectory.states.append(z.data.copy())
    return z, trajectory


def write_trajectories_csv(path, trajectories: list, column: int = 0) -> None:
    """One row per (trajectory, step); state column ``column`` of each batch."""
    if not trajectories:
        raise ValueError("no trajectories to write")
    dim = trajectories[0].states[0].shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trajectory", "step"] + [f"component_{j}" for j in range(dim)])
        for i, traj in enumerate(trajectories):
            for step, state in enumerate(traj.states):
                writer.writerow([i, step] + [repr(float(v)) for v in state[:, column]])
