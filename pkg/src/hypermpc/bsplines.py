"""Clamped B-spline curves: basis evaluation, evaluation, least-squares fit.

Used for three jobs: random excitation signals for dataset episodes,
compressing planned control sequences into control points, and interpolating
predicted parameter trajectories. Degree 3 with uniform clamped knots
throughout; the curve fitting lets callers resample a signal at any rate
without changing the control-point representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class SplineDomainError(ValueError):
    """Sample time outside the knot domain."""


class RankDeficientBasis(ValueError):
    """Least-squares basis matrix does not have full column rank."""


@dataclass(frozen=True)
class KnotVector:
    """Clamped knot vector: first and last knots repeated degree+1 times."""

    degree: int
    knots: np.ndarray

    @classmethod
    def clamped_uniform(cls, degree: int, num_points: int, t_start: float, t_end: float):
        """Uniform clamped knots supporting `num_points` basis functions."""
        if num_points < degree + 1:
            raise ValueError(f"need at least degree+1={degree + 1} control points, got {num_points}")
        if not t_end > t_start:
            raise ValueError(f"empty domain [{t_start}, {t_end}]")
        interior = np.linspace(t_start, t_end, num_points - degree + 1)[1:-1]
        knots = np.concatenate([
            np.full(degree + 1, float(t_start)),
            interior,
            np.full(degree + 1, float(t_end)),
        ])
        return cls(degree=degree, knots=knots)

    @property
    def num_basis(self) -> int:
        return len(self.knots) - self.degree - 1

    @property
    def domain(self) -> tuple:
        return float(self.knots[self.degree]), float(self.knots[-self.degree - 1])


def _find_span(kv: KnotVector, t: float) -> int:
    d = kv.degree
    knots = kv.knots
    lo, hi = d, len(knots) - d - 1
    if t >= knots[hi]:
        # right endpoint belongs to the last non-empty span
        i = hi - 1
        while knots[i + 1] <= knots[i]:
            i -= 1
        return i
    return int(np.searchsorted(knots, t, side="right")) - 1


def basis_matrix(kv: KnotVector, sample_times) -> np.ndarray:
    """All basis function values at each time: matrix [num_samples, num_basis].

    Rows sum to one (partition of unity). Times must lie in the knot domain.
    """
    times = np.atleast_1d(np.asarray(sample_times, dtype=np.float64))
    t0, t1 = kv.domain
    if np.any(times < t0) or np.any(times > t1):
        bad = times[(times < t0) | (times > t1)][0]
        raise SplineDomainError(f"sample time {bad} outside spline domain [{t0}, {t1}]")
    d = kv.degree
    knots = kv.knots
    out = np.zeros((len(times), kv.num_basis))
    vals = np.empty(d + 1)
    left = np.empty(d + 1)
    right = np.empty(d + 1)
    for row, t in enumerate(times):
        span = _find_span(kv, t)
        # Cox-de Boor triangular scheme for the d+1 non-vanishing functions
        vals[0] = 1.0
        for j in range(1, d + 1):
            left[j] = t - knots[span + 1 - j]
            right[j] = knots[span + j] - t
            saved = 0.0
            for r in range(j):
                tmp = vals[r] / (right[r + 1] + left[j - r])
                vals[r] = saved + right[r + 1] * tmp
                saved = left[j - r] * tmp
            vals[j] = saved
        out[row, span - d:span + 1] = vals[:d + 1]
    return out


@dataclass(frozen=True)
class SplineCurve:
    """B-spline curve: clamped knots plus control points [num_points, channels]."""

    knots: KnotVector
    control_points: np.ndarray

    def __post_init__(self):
        cp = np.asarray(self.control_points, dtype=np.float64)
        if cp.ndim == 1:
            cp = cp[:, None]
        if cp.shape[0] != self.knots.num_basis:
            raise ValueError(
                f"{cp.shape[0]} control points for a basis of size {self.knots.num_basis}")
        object.__setattr__(self, "control_points", cp)

    def evaluate(self, sample_times) -> np.ndarray:
        """Curve values at the given times: matrix [num_samples, channels]."""
        return basis_matrix(self.knots, sample_times) @ self.control_points


def evaluate_on_tape(basis: np.ndarray, control_points: ad.Tensor) -> ad.Tensor:
    """Differentiable curve evaluation given a precomputed basis matrix.

    Supports batched control points [batch, num_points, channels]; gradient
    w.r.t. the control points is exactly the basis matrix.
    """
    return ad.matmul(ad.Tensor(basis), control_points)


def fit_least_squares(samples, sample_times, kv: KnotVector):
    """Least-squares control points for the given samples; returns (curve, residual).

    Solved via QR for numerical robustness; `residual` is the Euclidean norm
    of the stacked residual vector.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    times = np.asarray(sample_times, dtype=np.float64)
    if samples.shape[0] != len(times):
        raise ValueError(f"{samples.shape[0]} samples but {len(times)} sample times")
    if samples.shape[0] < kv.num_basis:
        raise ValueError(
            f"need at least {kv.num_basis} samples to fit {kv.num_basis} control points")
    n = basis_matrix(kv, times)
    q, r = np.linalg.qr(n)
    diag = np.abs(np.diag(r))
    tol = max(n.shape) * np.finfo(np.float64).eps * (diag.max() if diag.size else 0.0)
    deficient = int(np.sum(diag <= tol))
    if deficient > 0:
        raise RankDeficientBasis(
            f"basis matrix is rank-deficient: {deficient} deficient columns")
    cp = np.linalg.solve(r, q.T @ samples)
    residual = float(np.linalg.norm(n @ cp - samples))
    return SplineCurve(knots=kv, control_points=cp), residual


def fit_matrix(kv: KnotVector, sample_times) -> np.ndarray:
    """Pseudoinverse mapping samples -> control points for fixed sample times.

    Cached by callers that repeatedly fit signals on the same time grid.
    """
    times = np.asarray(sample_times, dtype=np.float64)
    n = basis_matrix(kv, times)
    q, r = np.linalg.qr(n)
    diag = np.abs(np.diag(r))
    tol = max(n.shape) * np.finfo(np.float64).eps * (diag.max() if diag.size else 0.0)
    deficient = int(np.sum(diag <= tol))
    if deficient > 0:
        raise RankDeficientBasis(
            f"basis matrix is rank-deficient: {deficient} deficient columns")
    return np.linalg.solve(r, q.T)
