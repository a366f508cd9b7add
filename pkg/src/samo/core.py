"""Layered parameter containers and the multi-task problem interface.

Parameters live as an ordered list of per-layer dense vectors so that
layerwise operations (perturbation normalization, per-layer norms) have a
canonical representation; a flat view is available for eigensolvers.
"""

from __future__ import annotations

import threading
import zlib
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEGENERATE_NORM = 1e-12


class StructureError(ValueError):
    """Layer structures disagree or a layer index is out of range."""


class ConfigError(ValueError):
    """Invalid configuration value; message names the offending field."""


class NumericError(ArithmeticError):
    """Non-finite value encountered. Carries the task index when known."""

    def __init__(self, message: str, task: int | None = None):
        super().__init__(message)
        self.task = task


def substream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Named, per-purpose RNG substream derived from one root seed.

    Streams for distinct (purpose, indices) tuples are independent, so
    parallel and sequential consumers draw identical values.
    """
    key = (zlib.crc32(purpose.encode("ascii")),) + tuple(int(i) for i in indices)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


class LayeredParams:
    """Immutable ordered list of per-layer dense float64 vectors."""

    __slots__ = ("layers",)

    def __init__(self, layers: Iterable[np.ndarray | Sequence[float]]):
        arrays = []
        for layer in layers:
            arr = np.array(layer, dtype=np.float64).ravel()
            arr.setflags(write=False)
            arrays.append(arr)
        if not arrays or sum(a.size for a in arrays) == 0:
            raise StructureError("total dimension must be positive")
        self.layers = tuple(arrays)
        self._check_finite()

    @classmethod
    def _wrap(cls, arrays: list[np.ndarray]) -> "LayeredParams":
        # Internal fast path: takes ownership of freshly allocated arrays.
        obj = object.__new__(cls)
        for arr in arrays:
            arr.setflags(write=False)
        obj.layers = tuple(arrays)
        obj._check_finite()
        return obj

    def _check_finite(self):
        for d, arr in enumerate(self.layers):
            if not np.isfinite(arr).all():
                raise NumericError(f"non-finite entries in layer {d}")

    @property
    def structure(self) -> tuple[int, ...]:
        return tuple(a.size for a in self.layers)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def dim(self) -> int:
        return sum(a.size for a in self.layers)

    def layer(self, d: int) -> np.ndarray:
        if not 0 <= d < len(self.layers):
            raise StructureError(f"layer index {d} out of range [0, {len(self.layers)})")
        return self.layers[d]

    def to_flat(self) -> np.ndarray:
        return np.concatenate(self.layers)

    def replace_flat(self, flat: np.ndarray) -> "LayeredParams":
        """New params with this structure, entries taken from a flat vector."""
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if flat.size != self.dim:
            raise StructureError(f"flat vector has size {flat.size}, expected {self.dim}")
        out, offset = [], 0
        for arr in self.layers:
            out.append(flat[offset:offset + arr.size].copy())
            offset += arr.size
        return LayeredParams._wrap(out)

    def zeros_like(self) -> "LayeredParams":
        return LayeredParams._wrap([np.zeros(a.size) for a in self.layers])

    def dot(self, other: "LayeredParams") -> float:
        require_same_structure(self, other)
        return float(sum(np.dot(a, b) for a, b in zip(self.layers, other.layers)))

    def allclose(self, other: "LayeredParams", rtol=1e-12, atol=0.0) -> bool:
        return self.structure == other.structure and all(
            np.allclose(a, b, rtol=rtol, atol=atol)
            for a, b in zip(self.layers, other.layers)
        )

    def bit_equal(self, other: "LayeredParams") -> bool:
        return self.structure == other.structure and all(
            np.array_equal(a, b) for a, b in zip(self.layers, other.layers)
        )

    def __repr__(self):
        return f"LayeredParams(structure={self.structure})"


def require_same_structure(*items: LayeredParams):
    first = items[0].structure
    for other in items[1:]:
        if other.structure != first:
            raise StructureError(f"layer structures differ: {first} vs {other.structure}")


def axpy(a: float, x: LayeredParams, y: LayeredParams) -> LayeredParams:
    """a*x + y, elementwise over shared layer structure."""
    require_same_structure(x, y)
    return LayeredParams._wrap([a * xl + yl for xl, yl in zip(x.layers, y.layers)])


def scale(a: float, x: LayeredParams) -> LayeredParams:
    return LayeredParams._wrap([a * xl for xl in x.layers])


def mean_params(items: Sequence[LayeredParams]) -> LayeredParams:
    """Arithmetic mean of a non-empty list of same-structure params."""
    if not items:
        raise StructureError("cannot average an empty list")
    require_same_structure(*items)
    k = len(items)
    out = [np.sum([it.layers[d] for it in items], axis=0) / k
           for d in range(items[0].n_layers)]
    return LayeredParams._wrap(out)


def norm(x: LayeredParams, layer: int | None = None) -> float:
    """Euclidean norm over all entries, or over one layer when given."""
    if layer is None:
        return float(np.sqrt(sum(float(np.dot(a, a)) for a in x.layers)))
    return float(np.linalg.norm(x.layer(layer)))


def restrict(x: LayeredParams, keep: Sequence[int] | None) -> LayeredParams:
    """Zero out every layer not listed in keep; None keeps everything."""
    if keep is None:
        return x
    keep_set = set()
    for d in keep:
        if not 0 <= d < x.n_layers:
            raise StructureError(f"layer index {d} out of range [0, {x.n_layers})")
        keep_set.add(d)
    if len(keep_set) == x.n_layers:
        return x
    return LayeredParams._wrap([
        layer.copy() if d in keep_set else np.zeros(layer.size)
        for d, layer in enumerate(x.layers)
    ])


@dataclass(frozen=True)
class GradientSet:
    """Per-task gradients g_1..g_K plus the average-loss gradient g_0."""

    per_task: tuple[LayeredParams, ...]
    average: LayeredParams

    def __post_init__(self):
        require_same_structure(self.average, *self.per_task)

    @property
    def K(self) -> int:
        return len(self.per_task)

    @classmethod
    def from_exact(cls, per_task: Sequence[LayeredParams]) -> "GradientSet":
        """Build from exact task gradients; the average is their mean."""
        return cls(per_task=tuple(per_task), average=mean_params(per_task))


class PassCounters:
    """Thread-safe forward/backward pass counters."""

    def __init__(self):
        self._lock = threading.Lock()
        self._forwards = 0
        self._backwards = 0

    def add_forward(self, n: int = 1):
        with self._lock:
            self._forwards += n

    def add_backward(self, n: int = 1):
        with self._lock:
            self._backwards += n

    @property
    def forwards(self) -> int:
        return self._forwards

    @property
    def backwards(self) -> int:
        return self._backwards

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return self._forwards, self._backwards


class MultiTaskProblem(ABC):
    """K losses over shared layered parameters, with exact gradients and
    forward-only evaluations.

    Evaluations must be deterministic functions of theta. Every public
    loss call increments the forward counter by one; every gradient call
    increments the backward counter by one (a task's losses(theta) is a
    single shared forward pass).
    """

    def __init__(self, n_tasks: int):
        if n_tasks < 1:
            raise ConfigError("n_tasks must be >= 1")
        self._n_tasks = n_tasks
        self._counters = PassCounters()

    @property
    def K(self) -> int:
        return self._n_tasks

    @property
    def counters(self) -> PassCounters:
        return self._counters

    @property
    def layer_owner(self) -> tuple[int | None, ...]:
        """Task owning each layer; None marks a shared layer."""
        return (None,) * self.initial_params().n_layers

    def _check_task(self, i: int):
        if not 0 <= i < self._n_tasks:
            raise StructureError(f"task index {i} out of range [0, {self._n_tasks})")

    def loss(self, i: int, theta: LayeredParams) -> float:
        self._check_task(i)
        self._counters.add_forward()
        value = float(self._loss(i, theta))
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss for task {i}", task=i)
        return value

    def losses(self, theta: LayeredParams) -> np.ndarray:
        self._counters.add_forward()
        values = np.asarray(self._losses(theta), dtype=np.float64)
        if not np.isfinite(values).all():
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise NumericError(f"non-finite loss for task {bad}", task=bad)
        return values

    def grad(self, i: int, theta: LayeredParams) -> LayeredParams:
        self._check_task(i)
        self._counters.add_backward()
        try:
            return self._grad(i, theta)
        except NumericError as err:
            raise NumericError(f"non-finite gradient for task {i}", task=i) from err

    def avg_grad(self, theta: LayeredParams) -> LayeredParams:
        """Gradient of the average loss l_0 = (1/K) sum_i l_i; one backward pass."""
        self._counters.add_backward()
        return self._avg_grad(theta)

    def project(self, theta: LayeredParams) -> LayeredParams:
        """Feasibility projection applied after each update; identity by default."""
        return theta

    @abstractmethod
    def initial_params(self) -> LayeredParams: ...

    @abstractmethod
    def _loss(self, i: int, theta: LayeredParams) -> float: ...

    @abstractmethod
    def _losses(self, theta: LayeredParams) -> np.ndarray: ...

    @abstractmethod
    def _grad(self, i: int, theta: LayeredParams) -> LayeredParams: ...

    @abstractmethod
    def _avg_grad(self, theta: LayeredParams) -> LayeredParams: ...


@dataclass(frozen=True)
class GradientCheckReport:
    """Max relative error per task between analytic and central-difference
    directional derivatives."""

    max_rel_errors: tuple[float, ...]

    @property
    def worst(self) -> float:
        return max(self.max_rel_errors)


def check_gradients(problem: MultiTaskProblem, theta: LayeredParams,
                    n_dirs: int = 20, h: float = 1e-5, seed: int = 0) -> GradientCheckReport:
    """Probe each task's gradient along random unit directions.

    Central differences at step h; relative error uses an absolute floor of
    1e-8 so near-zero derivatives do not blow up the ratio.
    """
    if h <= 0:
        raise ConfigError("gradient-check step h must be > 0")
    dim = theta.dim
    errors = []
    for i in range(problem.K):
        g = problem.grad(i, theta)
        worst = 0.0
        for d in range(n_dirs):
            rng = substream(seed, "gradcheck", i, d)
            u = rng.standard_normal(dim)
            u /= np.linalg.norm(u)
            u_lp = theta.replace_flat(u)
            analytic = g.dot(u_lp)
            fd = (problem.loss(i, axpy(h, u_lp, theta))
                  - problem.loss(i, axpy(-h, u_lp, theta))) / (2.0 * h)
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)
            worst = max(worst, rel)
        errors.append(worst)
    return GradientCheckReport(max_rel_errors=tuple(errors))
