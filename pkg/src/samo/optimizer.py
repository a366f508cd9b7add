"""Training loop: perturbed gradients -> weighting method -> descent update,
with step schedules, classical momentum, scope handling for shared vs
task-owned layers, and trajectory recording."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    ConfigError,
    GradientSet,
    LayeredParams,
    MultiTaskProblem,
    NumericError,
    axpy,
    norm,
    restrict,
    substream,
)
from .sam import SamConfig, samo_gradients
from .weighting import WeightingMethod

SCHEDULES = ("constant", "halve_at")
SCOPES = ("all", "trunk_only")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    steps: int = 1000
    schedule: str = "halve_at"
    halve_fraction: float = 0.5
    momentum: float = 0.0
    seed: int = 0
    record_every: int = 1
    record_params: bool = False
    shared_scope: str = "all"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"optimizer.lr must be > 0, got {self.lr}")
        if self.steps < 1:
            raise ConfigError(f"optimizer.steps must be >= 1, got {self.steps}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"optimizer.schedule must be one of {SCHEDULES}, got '{self.schedule}'")
        if not 0.0 < self.halve_fraction <= 1.0:
            raise ConfigError(f"optimizer.halve_fraction must lie in (0, 1], got {self.halve_fraction}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"optimizer.momentum must lie in [0, 1), got {self.momentum}")
        if self.record_every < 1:
            raise ConfigError(f"optimizer.record_every must be >= 1, got {self.record_every}")
        if self.shared_scope not in SCOPES:
            raise ConfigError(f"optimizer.shared_scope must be one of {SCOPES}, got '{self.shared_scope}'")


def step_size(opt: OptimizerConfig, t: int) -> float:
    """Learning rate at step t: constant, or halved past the given fraction."""
    if not 0 <= t < opt.steps:
        raise ConfigError(f"step index {t} out of range [0, {opt.steps})")
    if opt.schedule == "constant":
        return opt.lr
    return opt.lr if t < opt.halve_fraction * opt.steps else opt.lr / 2.0


@dataclass
class StepRecord:
    iteration: int
    losses: np.ndarray
    dir_norm: float
    lr: float
    weights: np.ndarray | None
    fwd_delta: int
    bwd_delta: int
    params: LayeredParams | None = None
    extras: dict[str, float] = field(default_factory=dict)


@dataclass
class Trajectory:
    records: list[StepRecord]
    final_params: LayeredParams
    final_losses: np.ndarray | None
    forwards: int
    backwards: int

    def validate(self):
        iters = [r.iteration for r in self.records]
        if any(b <= a for a, b in zip(iters, iters[1:])):
            raise ValueError("trajectory iteration indices must be strictly increasing")
        lengths = {len(r.losses) for r in self.records}
        if len(lengths) > 1:
            raise ValueError("inconsistent loss-vector lengths across records")
        return self


class OptimizationAbort(NumericError):
    """Numeric failure inside the loop; carries the iteration, the last good
    parameters, and the partial trajectory recorded so far."""

    def __init__(self, message: str, iteration: int, last_params: LayeredParams,
                 trajectory: Trajectory):
        super().__init__(message)
        self.iteration = iteration
        self.last_params = last_params
        self.trajectory = trajectory


def _assemble_direction(combined: LayeredParams, per_task: Sequence[LayeredParams],
                        owner: Sequence[int | None]) -> LayeredParams:
    """Shared layers follow the combined direction; each task-owned layer
    follows its own task's gradient."""
    layers = []
    for d, own in enumerate(owner):
        layers.append(combined.layers[d] if own is None else per_task[own].layers[d])
    return LayeredParams(layers)


Hook = Callable[[int, LayeredParams, GradientSet], dict]


def run(problem: MultiTaskProblem, weighting: WeightingMethod, sam: SamConfig,
        opt: OptimizerConfig, theta0: LayeredParams | None = None,
        hooks: Sequence[Hook] = ()) -> Trajectory:
    """Run T optimization steps and return the recorded trajectory.

    Each iteration obtains a gradient set (exact per-task gradients when
    sam.mode is off), feeds the shared-scope restriction to the weighting
    method, applies the momentum-smoothed update, and projects back onto
    the feasible set. Recorded steps log losses at the pre-update point,
    so with record_every=1 each record's pass deltas are that iteration's
    algorithm passes plus one logging forward.
    """
    theta = problem.initial_params() if theta0 is None else theta0
    owner = problem.layer_owner
    trunk_only = opt.shared_scope == "trunk_only"
    shared_idx = [d for d, own in enumerate(owner) if own is None]
    if trunk_only and not shared_idx:
        raise ConfigError("shared_scope=trunk_only needs at least one shared layer")
    scope = shared_idx if trunk_only else None

    momentum_buf = theta.zeros_like()
    records: list[StepRecord] = []
    start_f, start_b = problem.counters.snapshot()
    last_f, last_b = start_f, start_b
    set_epoch = getattr(problem, "set_epoch", None)

    for t in range(opt.steps):
        if set_epoch is not None:
            set_epoch(t)
        recording = t % opt.record_every == 0
        try:
            losses = problem.losses(theta) if recording else None
            if sam.mode == "off":
                gset = GradientSet.from_exact(
                    [problem.grad(i, theta) for i in range(problem.K)])
            else:
                gset = samo_gradients(problem, theta, sam, seed=opt.seed,
                                      iteration=t, perturb_layers=scope).gradients
            rng = substream(opt.seed, "weighting", t)
            grads_for_m = [restrict(g, scope) for g in gset.per_task]
            combo = weighting.combine(grads_for_m, rng=rng)
            direction = combo.direction
            if trunk_only:
                direction = _assemble_direction(direction, gset.per_task, owner)
            momentum_buf = axpy(opt.momentum, momentum_buf, direction)
            lr_t = step_size(opt, t)
            theta_next = problem.project(axpy(-lr_t, momentum_buf, theta))
        except NumericError as err:
            partial = Trajectory(records, theta, None,
                                 problem.counters.forwards - start_f,
                                 problem.counters.backwards - start_b)
            raise OptimizationAbort(
                f"numeric failure at iteration {t}: {err}", t, theta, partial
            ) from err
        if recording:
            extras = {}
            for hook in hooks:
                extras.update(hook(t, theta, gset))
            now_f, now_b = problem.counters.snapshot()
            records.append(StepRecord(
                iteration=t, losses=losses, dir_norm=norm(direction), lr=lr_t,
                weights=None if combo.weights is None else np.asarray(combo.weights),
                fwd_delta=now_f - last_f, bwd_delta=now_b - last_b,
                params=theta if opt.record_params else None, extras=extras))
            last_f, last_b = now_f, now_b
        theta = theta_next

    final_losses = problem.losses(theta)
    now_f, now_b = problem.counters.snapshot()
    records.append(StepRecord(
        iteration=opt.steps, losses=final_losses, dir_norm=math.nan, lr=math.nan,
        weights=None, fwd_delta=now_f - last_f, bwd_delta=now_b - last_b,
        params=theta if opt.record_params else None))
    return Trajectory(records, theta, final_losses,
                      now_f - start_f, now_b - start_b).validate()
