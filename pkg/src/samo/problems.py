"""Concrete multi-task problems: the two-objective analytic toy, a synthetic
MLP regression problem with controllable task conflict, and small analytic
problems used as oracles."""

from __future__ import annotations

import csv
import math
import warnings
from typing import Callable, Sequence

import numpy as np

from .core import (
    ConfigError,
    GradientSet,
    LayeredParams,
    MultiTaskProblem,
    mean_params,
    substream,
)

X1_RANGE = (-6.0, 6.0)
X2_RANGE = (-3.0, 3.0)


def _f1(x1, x2):
    return 1.0 - 1.0 / (1.0 + (x1 ** 4 + x2 ** 4) / 10.0)


def _f2(x1, x2):
    return 1.0 - np.exp(-2.0 * (x1 + 4.0) ** 2 - 2.0 * x2 ** 2)


def _f1_grad(x1, x2):
    denom = (1.0 + (x1 ** 4 + x2 ** 4) / 10.0) ** 2
    return np.array([0.4 * x1 ** 3 / denom, 0.4 * x2 ** 3 / denom])


def _f2_grad(x1, x2):
    e = math.exp(-2.0 * (x1 + 4.0) ** 2 - 2.0 * x2 ** 2)
    return np.array([4.0 * (x1 + 4.0) * e, 4.0 * x2 * e])


def _clamp_box(x1: float, x2: float) -> tuple[float, float]:
    c1 = min(max(x1, X1_RANGE[0]), X1_RANGE[1])
    c2 = min(max(x2, X2_RANGE[0]), X2_RANGE[1])
    if (c1, c2) != (x1, x2):
        warnings.warn(f"point ({x1}, {x2}) outside the feasible box, clamped to ({c1}, {c2})")
    return c1, c2


def toy_losses(x1: float, x2: float) -> tuple[float, float]:
    """Evaluate both toy objectives at (x1, x2), clamping to the box."""
    x1, x2 = _clamp_box(x1, x2)
    return float(_f1(x1, x2)), float(_f2(x1, x2))


def toy_grads(x1: float, x2: float) -> GradientSet:
    """Analytic gradients of both toy objectives at (x1, x2)."""
    x1, x2 = _clamp_box(x1, x2)
    g1 = LayeredParams([_f1_grad(x1, x2)])
    g2 = LayeredParams([_f2_grad(x1, x2)])
    return GradientSet.from_exact([g1, g2])


def toy_pareto_grid(resolution: int) -> np.ndarray:
    """Dense (x1, x2, f1, f2) evaluation over the box, row-major in x1 then x2.

    Returns an array of shape (resolution**2, 4) for landscape/front plotting.
    """
    if resolution < 2:
        raise ConfigError("grid resolution must be >= 2")
    x1s = np.linspace(*X1_RANGE, resolution)
    x2s = np.linspace(*X2_RANGE, resolution)
    g1, g2 = np.meshgrid(x1s, x2s, indexing="ij")
    x1 = g1.ravel()
    x2 = g2.ravel()
    return np.column_stack([x1, x2, _f1(x1, x2), _f2(x1, x2)])


class ToyProblem(MultiTaskProblem):
    """The two-objective analytic toy; theta is one layer of length 2.

    Evaluations use the raw formulas (total on the plane) so perturbed
    probes just outside the box are fine; iterates are kept feasible by
    the projection, which clamps to the box after each update.
    """

    def __init__(self, start: tuple[float, float] = (-6.0, 1.0)):
        super().__init__(n_tasks=2)
        self._start = LayeredParams([np.asarray(start, dtype=np.float64)])

    def initial_params(self) -> LayeredParams:
        return self._start

    def project(self, theta: LayeredParams) -> LayeredParams:
        x1, x2 = theta.layers[0]
        c1 = min(max(float(x1), X1_RANGE[0]), X1_RANGE[1])
        c2 = min(max(float(x2), X2_RANGE[0]), X2_RANGE[1])
        if (c1, c2) == (x1, x2):
            return theta
        return LayeredParams([np.array([c1, c2])])

    def _loss(self, i, theta):
        x1, x2 = theta.layers[0]
        return _f1(x1, x2) if i == 0 else _f2(x1, x2)

    def _losses(self, theta):
        x1, x2 = theta.layers[0]
        return np.array([_f1(x1, x2), _f2(x1, x2)])

    def _grad(self, i, theta):
        x1, x2 = theta.layers[0]
        return LayeredParams([_f1_grad(x1, x2) if i == 0 else _f2_grad(x1, x2)])

    def _avg_grad(self, theta):
        x1, x2 = theta.layers[0]
        return LayeredParams([0.5 * (_f1_grad(x1, x2) + _f2_grad(x1, x2))])


def _teacher_directions(seed: int, n_tasks: int, in_dim: int,
                        angle_deg: float) -> tuple[np.ndarray, float]:
    """Unit vectors in R^in_dim whose pairwise cosines equal cos(angle).

    Realized through the Gram matrix G = (1-c) I + c 11^T, which is feasible
    iff c >= -1/(K-1). Returns (K x in_dim teachers, max Gram deviation).
    """
    c = math.cos(math.radians(angle_deg))
    if n_tasks > 2 and c < -1.0 / (n_tasks - 1) - 1e-12:
        raise ConfigError(
            f"infeasible Gram matrix: {n_tasks} tasks cannot pairwise realize "
            f"{angle_deg} degrees (cos must be >= -1/(K-1))")
    if in_dim < n_tasks:
        raise ConfigError(f"input dimension {in_dim} must be >= task count {n_tasks}")
    gram = np.full((n_tasks, n_tasks), c)
    np.fill_diagonal(gram, 1.0)
    evals, evecs = np.linalg.eigh(gram)
    factor = evecs * np.sqrt(np.clip(evals, 0.0, None))  # rows have Gram = gram
    gaussian = substream(seed, "teacher").standard_normal((in_dim, n_tasks))
    q, _ = np.linalg.qr(gaussian)
    teachers = factor @ q.T
    deviation = float(np.max(np.abs(teachers @ teachers.T - gram)))
    return teachers, deviation


# target nonlinearity gain; bounded tanh targets keep desk-scale training
# from degenerating into a linear interpolation problem
_TARGET_SCALE = 2.0


class MlpMultiTaskProblem(MultiTaskProblem):
    """Shared tanh trunk with one linear head per task, regressing on bounded
    nonlinear targets planted along teacher directions of configurable
    pairwise angle: y_k = tanh(2 * x . t_k).

    Full-batch, noiseless and deterministic per seed; set_epoch enables
    seeded mini-batching. Parameter layers: one block per trunk layer
    (weights then bias), then one block per head (weights then bias).
    """

    def __init__(self, seed: int, n_tasks: int, trunk_sizes: Sequence[int],
                 n_samples: int, conflict_angle_deg: float,
                 batch_size: int | None = None):
        if n_tasks < 2:
            raise ConfigError("n_tasks must be >= 2")
        if len(trunk_sizes) < 2 or any(s < 1 for s in trunk_sizes):
            raise ConfigError("trunk_sizes needs at least input and output widths >= 1")
        if n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if not 0.0 <= conflict_angle_deg <= 180.0:
            raise ConfigError("conflict_angle_deg must lie in [0, 180]")
        if batch_size is not None and not 1 <= batch_size <= n_samples:
            raise ConfigError("batch_size must lie in [1, n_samples]")
        super().__init__(n_tasks=n_tasks)
        self.seed = seed
        self.trunk_sizes = tuple(int(s) for s in trunk_sizes)
        self.n_samples = int(n_samples)
        self.conflict_angle_deg = float(conflict_angle_deg)
        self.batch_size = batch_size

        teachers, dev = _teacher_directions(seed, n_tasks, self.trunk_sizes[0],
                                            conflict_angle_deg)
        self.teachers = teachers
        self.teacher_gram_deviation = dev

        self.X = substream(seed, "data").standard_normal(
            (self.n_samples, self.trunk_sizes[0]))
        self.Y = np.tanh(_TARGET_SCALE * (self.X @ teachers.T))  # (n_samples, K)

        rng = substream(seed, "init")
        blocks = []
        for fan_in, fan_out in zip(self.trunk_sizes, self.trunk_sizes[1:]):
            w = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
            blocks.append(np.concatenate([w.ravel(), np.zeros(fan_out)]))
        for _ in range(n_tasks):
            u = rng.standard_normal(self.trunk_sizes[-1]) / math.sqrt(self.trunk_sizes[-1])
            blocks.append(np.concatenate([u, [0.0]]))
        self._theta0 = LayeredParams(blocks)
        self._batch_idx = np.arange(self.n_samples)

    @property
    def n_trunk_layers(self) -> int:
        return len(self.trunk_sizes) - 1

    @property
    def layer_owner(self) -> tuple[int | None, ...]:
        return (None,) * self.n_trunk_layers + tuple(range(self.K))

    def initial_params(self) -> LayeredParams:
        return self._theta0

    def set_epoch(self, epoch: int):
        """Fix the mini-batch for this evaluation epoch from the root seed."""
        if self.batch_size is None:
            return
        rng = substream(self.seed, "batch", epoch)
        self._batch_idx = np.sort(rng.choice(self.n_samples, self.batch_size,
                                             replace=False))

    def _unpack(self, theta: LayeredParams):
        ws, bs = [], []
        for d, (fan_in, fan_out) in enumerate(zip(self.trunk_sizes, self.trunk_sizes[1:])):
            block = theta.layers[d]
            ws.append(block[:fan_in * fan_out].reshape(fan_in, fan_out))
            bs.append(block[fan_in * fan_out:])
        us, cs = [], []
        for k in range(self.K):
            block = theta.layers[self.n_trunk_layers + k]
            us.append(block[:-1])
            cs.append(block[-1])
        return ws, bs, us, cs

    def _forward_trunk(self, theta: LayeredParams):
        ws, bs, us, cs = self._unpack(theta)
        x = self.X[self._batch_idx]
        activations = [x]
        h = x
        for w, b in zip(ws, bs):
            h = np.tanh(h @ w + b)
            activations.append(h)
        return activations, ws, us, cs

    def _losses(self, theta):
        # per-head expressions keep losses() bit-identical to loss(i)
        activations, _, us, cs = self._forward_trunk(theta)
        h = activations[-1]
        y = self.Y[self._batch_idx]
        return np.array([np.mean((h @ us[k] + cs[k] - y[:, k]) ** 2)
                         for k in range(self.K)])

    def _loss(self, i, theta):
        activations, _, us, cs = self._forward_trunk(theta)
        pred = activations[-1] @ us[i] + cs[i]
        return float(np.mean((pred - self.Y[self._batch_idx, i]) ** 2))

    def _backward(self, theta: LayeredParams, task_weights: np.ndarray) -> LayeredParams:
        """Backprop of sum_k task_weights[k] * loss_k; one pass for any weighting."""
        activations, ws, us, cs = self._forward_trunk(theta)
        h = activations[-1]
        y = self.Y[self._batch_idx]
        n = h.shape[0]
        preds = h @ np.column_stack(us) + np.asarray(cs)
        resid = (2.0 / n) * (preds - y) * task_weights  # (n, K)

        head_blocks = []
        for k in range(self.K):
            gu = h.T @ resid[:, k]
            gc = resid[:, k].sum()
            head_blocks.append(np.concatenate([gu, [gc]]))

        delta = resid @ np.stack(us)  # (n, trunk_out)
        trunk_blocks = [None] * self.n_trunk_layers
        for d in range(self.n_trunk_layers - 1, -1, -1):
            dz = delta * (1.0 - activations[d + 1] ** 2)
            gw = activations[d].T @ dz
            gb = dz.sum(axis=0)
            trunk_blocks[d] = np.concatenate([gw.ravel(), gb])
            if d > 0:
                delta = dz @ ws[d].T
        return LayeredParams(trunk_blocks + head_blocks)

    def _grad(self, i, theta):
        weights = np.zeros(self.K)
        weights[i] = 1.0
        return self._backward(theta, weights)

    def _avg_grad(self, theta):
        return self._backward(theta, np.full(self.K, 1.0 / self.K))

    def export_dataset_csv(self, path):
        """Write the synthetic dataset (features then per-task targets)."""
        p = self.trunk_sizes[0]
        header = [f"feature_{j}" for j in range(p)] + \
                 [f"target_task_{k + 1}" for k in range(self.K)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for xi, yi in zip(self.X, self.Y):
                writer.writerow([f"{v:.17g}" for v in xi] + [f"{v:.17g}" for v in yi])


def load_dataset_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a dataset written by export_dataset_csv; returns (X, Y)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_feat = sum(1 for c in header if c.startswith("feature_"))
        n_tasks = sum(1 for c in header if c.startswith("target_task_"))
        if n_feat + n_tasks != len(header):
            raise ConfigError(f"unrecognized dataset columns in {path}")
        rows = [[float(v) for v in row] for row in reader]
    data = np.asarray(rows)
    return data[:, :n_feat], data[:, n_feat:]


def make_mlp_problem(seed: int, n_tasks: int, trunk_sizes: Sequence[int],
                     n_samples: int, conflict_angle_deg: float,
                     batch_size: int | None = None) -> MlpMultiTaskProblem:
    return MlpMultiTaskProblem(seed, n_tasks, trunk_sizes, n_samples,
                               conflict_angle_deg, batch_size=batch_size)


class QuadraticProblem(MultiTaskProblem):
    """K quadratic objectives l_i = 0.5 x'A_i x + b_i.x + c_i; exact analytic
    gradients make it the workhorse oracle problem."""

    def __init__(self, matrices: Sequence[np.ndarray],
                 offsets: Sequence[np.ndarray] | None = None,
                 constants: Sequence[float] | None = None,
                 structure: Sequence[int] | None = None):
        matrices = [np.asarray(a, dtype=np.float64) for a in matrices]
        super().__init__(n_tasks=len(matrices))
        m = matrices[0].shape[0]
        for a in matrices:
            if a.shape != (m, m):
                raise ConfigError("all quadratic matrices must share one square shape")
        self.matrices = matrices
        self.offsets = ([np.zeros(m)] * self.K if offsets is None
                        else [np.asarray(b, dtype=np.float64) for b in offsets])
        self.constants = [0.0] * self.K if constants is None else list(constants)
        self._template = LayeredParams(
            [np.zeros(s) for s in (structure or (m,))])
        if self._template.dim != m:
            raise ConfigError("layer structure does not match matrix dimension")

    def initial_params(self) -> LayeredParams:
        return self._template

    def _loss(self, i, theta):
        x = theta.to_flat()
        return 0.5 * x @ self.matrices[i] @ x + self.offsets[i] @ x + self.constants[i]

    def _losses(self, theta):
        return np.array([self._loss(i, theta) for i in range(self.K)])

    def _grad(self, i, theta):
        x = theta.to_flat()
        return theta.replace_flat(self.matrices[i] @ x + self.offsets[i])

    def _avg_grad(self, theta):
        return mean_params([self._grad(i, theta) for i in range(self.K)])


class CallableProblem(MultiTaskProblem):
    """Adapter turning (loss_fn, grad_fn) pairs into a MultiTaskProblem."""

    def __init__(self, tasks: Sequence[tuple[Callable, Callable]],
                 template: LayeredParams):
        super().__init__(n_tasks=len(tasks))
        self._tasks = list(tasks)
        self._template = template

    def initial_params(self) -> LayeredParams:
        return self._template

    def _loss(self, i, theta):
        return self._tasks[i][0](theta)

    def _losses(self, theta):
        return np.array([fn(theta) for fn, _ in self._tasks])

    def _grad(self, i, theta):
        return self._tasks[i][1](theta)

    def _avg_grad(self, theta):
        return mean_params([fn(theta) for _, fn in self._tasks])
