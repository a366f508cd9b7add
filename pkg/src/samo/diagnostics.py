"""Conflict and sharpness instrumentation: task-gradient cosine matrices,
matrix-free Hessian spectrum probes on the averaged loss, and the average
relative-performance metric against per-task baselines."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    DEGENERATE_NORM,
    ConfigError,
    LayeredParams,
    MultiTaskProblem,
    axpy,
    norm,
    scale,
    substream,
)


@dataclass(frozen=True)
class CosineMatrix:
    """Pairwise cosine similarities; rows/columns of zero-norm gradients are
    zeroed by convention and their indices flagged."""

    matrix: np.ndarray
    degenerate: tuple[int, ...]

    @property
    def K(self) -> int:
        return self.matrix.shape[0]

    def mean_offdiagonal(self) -> float:
        k = self.K
        off = self.matrix[~np.eye(k, dtype=bool)]
        return float(off.mean())


def cosine_matrix(gradients: Sequence[LayeredParams]) -> CosineMatrix:
    if len(gradients) < 2:
        raise ConfigError("cosine_matrix needs at least two gradients")
    flats = np.stack([g.to_flat() for g in gradients])
    norms = np.linalg.norm(flats, axis=1)
    degenerate = tuple(int(i) for i in np.flatnonzero(norms < DEGENERATE_NORM))
    safe = np.where(norms < DEGENERATE_NORM, 1.0, norms)
    unit = flats / safe[:, None]
    matrix = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(matrix, 1.0)
    for i in degenerate:
        matrix[i, :] = 0.0
        matrix[:, i] = 0.0
    return CosineMatrix(matrix=matrix, degenerate=degenerate)


def hvp(problem: MultiTaskProblem, theta: LayeredParams, v: LayeredParams,
        delta: float | None = None) -> LayeredParams:
    """Central-difference Hessian-vector product of the averaged loss;
    two backward passes."""
    v_norm = norm(v)
    if v_norm < DEGENERATE_NORM:
        raise ConfigError("hvp needs a direction with nonzero norm")
    if delta is None:
        delta = 1e-4 * (1.0 + norm(theta))
    if delta <= 0:
        raise ConfigError(f"hvp step delta must be > 0, got {delta}")
    unit = scale(1.0 / v_norm, v)
    grad_plus = problem.avg_grad(axpy(delta, unit, theta))
    grad_minus = problem.avg_grad(axpy(-delta, unit, theta))
    return scale(v_norm / (2.0 * delta), axpy(-1.0, grad_minus, grad_plus))


@dataclass
class SpectrumReport:
    """Top eigenvalues of the averaged-loss Hessian, descending, with the
    explicit residual ||Hv - lambda*v|| of each unit eigenvector."""

    eigenvalues: np.ndarray
    residuals: np.ndarray
    converged: bool
    tol: float

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def bulk_ratio(self) -> float | None:
        """lambda_max / lambda_5; only defined when five pairs were requested."""
        if self.eigenvalues.size < 5:
            return None
        return float(self.eigenvalues[0] / self.eigenvalues[4])

    def to_dict(self) -> dict:
        return {
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "lambda_max": self.lambda_max,
            "bulk_ratio": self.bulk_ratio,
            "residuals": [float(r) for r in self.residuals],
            "converged": bool(self.converged),
            "tol": self.tol,
        }


def _block_ritz(alphas, betas, vectors):
    """Ritz pairs of one Lanczos block plus the cheap residual estimate
    beta_j * |last component|."""
    j = len(alphas)
    tri = np.diag(alphas)
    if j > 1:
        inner = np.array(betas[:j - 1])
        tri += np.diag(inner, 1) + np.diag(inner, -1)
    evals, evecs = np.linalg.eigh(tri)
    basis = np.stack(vectors, axis=1)  # (m, j)
    last_beta = betas[j - 1] if len(betas) >= j else 0.0
    pairs = []
    for idx in range(j):
        ritz_vec = basis @ evecs[:, idx]
        est = abs(last_beta * evecs[-1, idx])
        pairs.append((float(evals[idx]), ritz_vec, est))
    return pairs


def hessian_spectrum(problem: MultiTaskProblem, theta: LayeredParams, k: int = 5,
                     iters: int | None = None, tol: float = 1e-6,
                     seed: int = 0) -> SpectrumReport:
    """Top-k eigenvalues of the averaged-loss Hessian via Lanczos with full
    reorthogonalization over central-difference Hessian-vector products.

    Lucky breakdowns (invariant subspaces, repeated eigenvalues) trigger a
    restart with a fresh direction orthogonal to everything seen, so
    multiplicities are resolved. Deterministic given the seed.
    """
    m = theta.dim
    if k < 1:
        raise ConfigError(f"spectrum k must be >= 1, got {k}")
    if m < k:
        raise ConfigError(f"parameter dimension {m} must be >= k={k}")
    if iters is None:
        iters = 20 * k
    budget = max(iters, k)
    delta = 1e-4 * (1.0 + norm(theta))

    def matvec(x: np.ndarray) -> np.ndarray:
        return hvp(problem, theta, theta.replace_flat(x), delta).to_flat()

    rng = substream(seed, "lanczos")
    all_vecs: list[np.ndarray] = []
    finished_pairs: list[tuple[float, np.ndarray, float]] = []
    steps = 0

    def top_candidates(extra):
        merged = finished_pairs + extra
        merged.sort(key=lambda p: p[0], reverse=True)
        return merged[:k]

    while steps < budget and len(all_vecs) < m:
        # fresh start vector, deflated against every Lanczos vector so far
        q = rng.standard_normal(m)
        for _ in range(2):
            for v in all_vecs:
                q -= (v @ q) * v
        q_norm = np.linalg.norm(q)
        if q_norm < 1e-10:
            break
        q /= q_norm
        alphas, betas = [], []
        block_vecs = [q]
        all_vecs.append(q)
        prev = np.zeros(m)
        beta = 0.0
        converged = False
        while steps < budget:
            u = matvec(q)
            alpha = float(q @ u)
            alphas.append(alpha)
            r = u - alpha * q - beta * prev
            for _ in range(2):
                for v in all_vecs:
                    r -= (v @ r) * v
            beta = float(np.linalg.norm(r))
            betas.append(beta)
            steps += 1
            pairs = _block_ritz(alphas, betas, block_vecs)
            candidates = top_candidates(pairs)
            if len(finished_pairs) + len(pairs) >= k and all(
                    est <= tol * max(1.0, abs(val)) for val, _, est in candidates):
                converged = True
                break
            if beta < 1e-12 * max(1.0, abs(alpha)) or len(all_vecs) == m:
                break  # invariant subspace: restart with a new direction
            prev = q
            q = r / beta
            block_vecs.append(q)
            all_vecs.append(q)
        finished_pairs.extend(_block_ritz(alphas, betas, block_vecs))
        if converged:
            break

    finished_pairs.sort(key=lambda p: p[0], reverse=True)
    top = finished_pairs[:k]
    eigenvalues = np.array([val for val, _, _ in top])
    residuals = []
    for val, vec, _ in top:
        vec = vec / np.linalg.norm(vec)
        residuals.append(float(np.linalg.norm(matvec(vec) - val * vec)))
    residuals = np.array(residuals)
    ok = bool(len(top) == k and np.all(
        residuals <= tol * np.maximum(1.0, np.abs(eigenvalues))))
    return SpectrumReport(eigenvalues=eigenvalues, residuals=residuals,
                          converged=ok, tol=tol)


@dataclass(frozen=True)
class MetricSpec:
    """One metric compared against its single-task baseline."""

    name: str
    baseline: float
    value: float
    higher_is_better: bool


def delta_m(metrics: Sequence[MetricSpec]) -> float:
    """Mean signed per-metric relative change versus the baseline, percent.

    Improvements on higher-is-better metrics contribute negatively, so
    lower is better overall.
    """
    if not metrics:
        raise ConfigError("delta_m needs at least one metric")
    total = 0.0
    for metric in metrics:
        if metric.baseline == 0.0:
            raise ConfigError(f"metric '{metric.name}' has a zero baseline")
        sign = -1.0 if metric.higher_is_better else 1.0
        total += sign * (metric.value - metric.baseline) / metric.baseline * 100.0
    return total / len(metrics)


def save_spectrum_json(report: SpectrumReport, path):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_cosine_csv(cm: CosineMatrix, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"task_{j + 1}" for j in range(cm.K)])
        for row in cm.matrix:
            writer.writerow([f"{v:.17g}" for v in row])
