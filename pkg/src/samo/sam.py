"""Perturbation engines: global SAM, per-task local SAM, and the joint
global-local variant whose local terms come from a forward-only estimator
with layerwise magnitude normalization."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .core import (
    DEGENERATE_NORM,
    ConfigError,
    GradientSet,
    LayeredParams,
    MultiTaskProblem,
    axpy,
    mean_params,
    norm,
    require_same_structure,
    restrict,
    scale,
    substream,
)

MODES = ("off", "global", "local", "joint")
ESTIMATORS = ("exact", "spsa")
NORMALIZATIONS = ("layerwise", "global", "none")


@dataclass(frozen=True)
class SamConfig:
    """Perturbation settings.

    mode=global equals mode=joint with alpha=1; mode=local with exact
    estimates equals mode=joint with alpha=0 (bit-identical given the same
    RNG substreams).
    """

    mode: str = "off"
    rho: float = 0.001
    alpha: float = 0.5
    mu: float = 0.01
    estimator: str = "spsa"
    normalization: str = "layerwise"
    spsa_samples: int = 1
    parallel: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"sam.mode must be one of {MODES}, got '{self.mode}'")
        if self.rho <= 0:
            raise ConfigError(f"sam.rho must be > 0, got {self.rho}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"sam.alpha must lie in [0, 1], got {self.alpha}")
        if self.mu <= 0:
            raise ConfigError(f"sam.mu must be > 0, got {self.mu}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"sam.estimator must be one of {ESTIMATORS}, got '{self.estimator}'")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(
                f"sam.normalization must be one of {NORMALIZATIONS}, got '{self.normalization}'")
        if self.spsa_samples < 1:
            raise ConfigError(f"sam.spsa_samples must be >= 1, got {self.spsa_samples}")


class Perturbation(NamedTuple):
    vector: LayeredParams
    degenerate: bool


def sam_perturbation(g: LayeredParams, rho: float) -> Perturbation:
    """rho * g / ||g||; zero with a degenerate flag when ||g|| vanishes."""
    if rho <= 0:
        raise ConfigError(f"rho must be > 0, got {rho}")
    g_norm = norm(g)
    if g_norm < DEGENERATE_NORM:
        return Perturbation(g.zeros_like(), True)
    return Perturbation(scale(rho / g_norm, g), False)


def joint_perturbation(g0: LayeredParams, gi_hat: LayeredParams,
                       rho: float, alpha: float) -> Perturbation:
    """rho-normalized blend alpha*g0 + (1-alpha)*gi_hat.

    alpha of exactly 0 or 1 short-circuits to the pure branch so the
    collapse onto local/global perturbations is bit-exact.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    require_same_structure(g0, gi_hat)
    if alpha == 0.0:
        blend = gi_hat
    elif alpha == 1.0:
        blend = g0
    else:
        blend = axpy(alpha, g0, scale(1.0 - alpha, gi_hat))
    return sam_perturbation(blend, rho)


def spsa_estimate(problem: MultiTaskProblem, task: int, theta: LayeredParams,
                  mu: float, rng: np.random.Generator,
                  perturb_layers: Sequence[int] | None = None) -> LayeredParams:
    """Two-forward-pass gradient estimate along one Gaussian direction:
    ((l(theta+mu*z) - l(theta-mu*z)) / (2*mu)) * z.

    With perturb_layers given, z is zeroed outside those layers so both the
    probes and the estimate stay within the perturbation scope.
    """
    if mu <= 0:
        raise ConfigError(f"mu must be > 0, got {mu}")
    z = restrict(theta.replace_flat(rng.standard_normal(theta.dim)), perturb_layers)
    loss_plus = problem.loss(task, axpy(mu, z, theta))
    loss_minus = problem.loss(task, axpy(-mu, z, theta))
    return scale((loss_plus - loss_minus) / (2.0 * mu), z)


def layerwise_normalize(estimate: LayeredParams,
                        reference: LayeredParams) -> LayeredParams:
    """Rescale each layer block of the estimate so its norm matches the
    reference's corresponding layer norm; vanishing layers become zeros."""
    require_same_structure(estimate, reference)
    out = []
    for est_layer, ref_layer in zip(estimate.layers, reference.layers):
        est_norm = float(np.linalg.norm(est_layer))
        if est_norm < DEGENERATE_NORM:
            out.append(np.zeros(est_layer.size))
        else:
            out.append(est_layer * (float(np.linalg.norm(ref_layer)) / est_norm))
    return LayeredParams(out)


def global_normalize(estimate: LayeredParams,
                     reference: LayeredParams) -> tuple[LayeredParams, bool]:
    """Scale all entries by ||reference|| / ||estimate|| (global norms)."""
    require_same_structure(estimate, reference)
    est_norm = norm(estimate)
    if est_norm < DEGENERATE_NORM:
        return estimate.zeros_like(), True
    return scale(norm(reference) / est_norm, estimate), False


@dataclass(frozen=True)
class SamoResult:
    """Per-task gradients at the perturbed points, the unperturbed average
    gradient, and the perturbations that produced them."""

    gradients: GradientSet
    perturbations: tuple[LayeredParams, ...]
    degenerate: tuple[bool, ...]


def samo_gradients(problem: MultiTaskProblem, theta: LayeredParams,
                   config: SamConfig, *, seed: int = 0, iteration: int = 0,
                   perturb_layers: Sequence[int] | None = None) -> SamoResult:
    """One round of perturbed gradient computation (the inner loop body).

    Pass budget per call: global mode costs K+1 backward passes; joint mode
    with the forward-only estimator costs K+1 backwards plus 2K forwards
    (per estimate sample); local/joint mode with exact estimates and no
    global blending costs 2K backwards, with the returned average taken as
    the mean of the exact task gradients instead of a dedicated pass.
    """
    if config.mode == "off":
        raise ConfigError("samo_gradients needs sam.mode != 'off'")
    k = problem.K

    if config.mode == "global":
        g0 = problem.avg_grad(theta)
        pert, degenerate = sam_perturbation(restrict(g0, perturb_layers), config.rho)
        theta_p = axpy(1.0, pert, theta)
        per_task = [problem.grad(i, theta_p) for i in range(k)]
        return SamoResult(GradientSet(tuple(per_task), g0),
                          (pert,) * k, (degenerate,) * k)

    alpha = config.alpha if config.mode == "joint" else 0.0
    exact_local = config.estimator == "exact"
    skip_g0 = exact_local and alpha == 0.0
    g0 = None if skip_g0 else problem.avg_grad(theta)
    g0_r = None if g0 is None else restrict(g0, perturb_layers)

    def task_branch(i: int):
        if exact_local:
            raw = problem.grad(i, theta)
            local = restrict(raw, perturb_layers)
        else:
            raw = None
            rng = substream(seed, "spsa", iteration, i)
            samples = [spsa_estimate(problem, i, theta, config.mu, rng,
                                     perturb_layers=perturb_layers)
                       for _ in range(config.spsa_samples)]
            local = samples[0] if len(samples) == 1 else mean_params(samples)
            if config.normalization == "layerwise":
                local = layerwise_normalize(local, g0_r)
            elif config.normalization == "global":
                local, _ = global_normalize(local, g0_r)
        if alpha == 0.0:
            pert, degenerate = sam_perturbation(local, config.rho)
        else:
            pert, degenerate = joint_perturbation(g0_r, local, config.rho, alpha)
        g_samo = problem.grad(i, axpy(1.0, pert, theta))
        return g_samo, pert, degenerate, raw

    if config.parallel and k > 1:
        with ThreadPoolExecutor(max_workers=min(k, 8)) as pool:
            results = list(pool.map(task_branch, range(k)))
    else:
        results = [task_branch(i) for i in range(k)]

    per_task = tuple(r[0] for r in results)
    perturbations = tuple(r[1] for r in results)
    degenerate = tuple(r[2] for r in results)
    average = g0 if g0 is not None else mean_params([r[3] for r in results])
    return SamoResult(GradientSet(per_task, average), perturbations, degenerate)
