"""Gradient-manipulation methods mapping K task gradients to one update
direction. LS, MGDA (min-norm point via Frank-Wolfe on the simplex), and
PCGrad are built in; further methods plug in through WeightingMethod."""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import (
    DEGENERATE_NORM,
    ConfigError,
    LayeredParams,
    mean_params,
    require_same_structure,
)


@dataclass(frozen=True)
class CombineResult:
    direction: LayeredParams
    weights: np.ndarray | None


@dataclass(frozen=True)
class MgdaResult(CombineResult):
    min_norm: float
    gap: float
    converged: bool
    pareto_stationary: bool


def ls_combine(gradients: Sequence[LayeredParams]) -> CombineResult:
    """Mean of the task gradients, matching the gradient of the average loss."""
    if not gradients:
        raise ConfigError("ls_combine needs at least one gradient")
    k = len(gradients)
    return CombineResult(direction=mean_params(gradients),
                         weights=np.full(k, 1.0 / k))


def _min_norm_two(g1: np.ndarray, g2: np.ndarray) -> float:
    """Closed-form weight of g1 for the min-norm point of a 2-gradient hull."""
    diff = g1 - g2
    den = float(diff @ diff)
    if den <= DEGENERATE_NORM ** 2:
        return 0.5
    gamma = float((g2 - g1) @ g2) / den
    return min(max(gamma, 0.0), 1.0)


def _affine_polish(gram: np.ndarray, weights: np.ndarray) -> np.ndarray | None:
    """Exact minimizer of w'Gw over the simplex face spanned by the current
    support (Wolfe's minor cycle). Plain Frank-Wolfe zigzags sublinearly at
    facial optima; jumping to the face's affine minimizer restores fast
    convergence. Drops negative-weight vertices until feasible."""
    k = gram.shape[0]
    support = np.flatnonzero(weights > 1e-12).tolist() or [int(np.argmax(weights))]
    while support:
        n = len(support)
        kkt = np.zeros((n + 1, n + 1))
        kkt[:n, :n] = 2.0 * gram[np.ix_(support, support)]
        kkt[:n, n] = 1.0
        kkt[n, :n] = 1.0
        rhs = np.zeros(n + 1)
        rhs[n] = 1.0
        solution = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:n]
        if np.all(solution >= -1e-12):
            out = np.zeros(k)
            out[support] = np.clip(solution, 0.0, None)
            total = out.sum()
            return out / total if total > 0 else None
        support.pop(int(np.argmin(solution)))
    return None


def mgda_combine(gradients: Sequence[LayeredParams], max_iters: int = 250,
                 tol: float = 1e-7) -> MgdaResult:
    """Minimum-norm element of the convex hull of the task gradients.

    K=2 uses the closed form; larger K runs Frank-Wolfe with exact line
    search on the simplex until the duality gap drops below tol. If the
    resulting direction has norm <= tol the point is Pareto stationary
    (some convex combination of the gradients vanishes).
    """
    if not gradients:
        raise ConfigError("mgda_combine needs at least one gradient")
    if tol <= 0:
        raise ConfigError("mgda tol must be > 0")
    require_same_structure(*gradients)
    k = len(gradients)
    flats = np.stack([g.to_flat() for g in gradients])
    gram = flats @ flats.T

    if k == 1:
        weights = np.array([1.0])
        converged = True
    elif k == 2:
        gamma = _min_norm_two(flats[0], flats[1])
        weights = np.array([gamma, 1.0 - gamma])
        converged = True
    else:
        weights = np.full(k, 1.0 / k)
        converged = False
        for _ in range(max_iters):
            gw = gram @ weights
            vertex = int(np.argmin(gw))
            gap = 2.0 * float(weights @ gw - gw[vertex])
            if gap <= tol:
                converged = True
                break
            step_dir = -weights
            step_dir[vertex] += 1.0
            curvature = float(step_dir @ gram @ step_dir)
            if curvature <= 0.0:
                t = 1.0
            else:
                t = min(max(0.5 * gap / curvature, 0.0), 1.0)
            weights = weights + t * step_dir
            polished = _affine_polish(gram, weights)
            if polished is not None and \
                    polished @ gram @ polished <= weights @ gram @ weights:
                weights = polished
        weights = np.clip(weights, 0.0, None)
        weights /= weights.sum()

    gw = gram @ weights
    gap = max(2.0 * float(weights @ gw - gw.min()), 0.0)
    if k <= 2:
        converged = True
    else:
        converged = converged or gap <= tol
    direction = gradients[0].replace_flat(weights @ flats)
    min_norm = float(np.sqrt(max(float(weights @ gw), 0.0)))
    return MgdaResult(direction=direction, weights=weights, min_norm=min_norm,
                      gap=gap, converged=converged,
                      pareto_stationary=min_norm <= tol)


def pcgrad_combine(gradients: Sequence[LayeredParams],
                   rng: np.random.Generator) -> CombineResult:
    """Project each task gradient off the others it conflicts with, visiting
    the others in seeded random order, then average.

    Pairs whose reference gradient has (near-)zero norm are skipped.
    """
    if len(gradients) < 2:
        raise ConfigError("pcgrad_combine needs at least two gradients")
    require_same_structure(*gradients)
    k = len(gradients)
    flats = [g.to_flat() for g in gradients]
    norms_sq = [float(f @ f) for f in flats]
    projected = []
    for i in range(k):
        gi = flats[i].copy()
        order = np.array([j for j in range(k) if j != i])
        rng.shuffle(order)
        for j in order:
            if norms_sq[j] <= DEGENERATE_NORM ** 2:
                continue
            dot = float(gi @ flats[j])
            if dot < 0.0:
                gi -= (dot / norms_sq[j]) * flats[j]
        projected.append(gi)
    direction = gradients[0].replace_flat(np.mean(projected, axis=0))
    return CombineResult(direction=direction, weights=None)


class WeightingMethod(ABC):
    """Pluggable combiner; third-party methods implement combine()."""

    name: str = "custom"

    @abstractmethod
    def combine(self, gradients: Sequence[LayeredParams],
                rng: np.random.Generator | None = None) -> CombineResult: ...


class LinearScalarization(WeightingMethod):
    name = "ls"

    def combine(self, gradients, rng=None):
        return ls_combine(gradients)


class Mgda(WeightingMethod):
    name = "mgda"

    def __init__(self, max_iters: int = 250, tol: float = 1e-7):
        self.max_iters = max_iters
        self.tol = tol

    def combine(self, gradients, rng=None):
        return mgda_combine(gradients, max_iters=self.max_iters, tol=self.tol)


class PCGrad(WeightingMethod):
    name = "pcgrad"

    def combine(self, gradients, rng=None):
        if rng is None:
            raise ConfigError("pcgrad needs the iteration RNG substream")
        return pcgrad_combine(gradients, rng)


_REGISTRY: dict[str, Callable[[], WeightingMethod]] = {
    "ls": LinearScalarization,
    "mgda": Mgda,
    "pcgrad": PCGrad,
}


def register_method(name: str, factory: Callable[[], WeightingMethod]):
    """Expose an external WeightingMethod (e.g. FairGrad, Nash-MTL) by name."""
    _REGISTRY[name] = factory


def get_method(name: str) -> WeightingMethod:
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise ConfigError(
            f"unknown weighting method '{name}'; available: {sorted(_REGISTRY)}"
        ) from None
