"""Nonnegative least squares and the two online models built on it.

The scheduler learns two things about a running job: how many epochs remain
until convergence (from the loss history, which SGD lets us model as
``loss = 1/(beta0*k + beta1) + beta2``) and how fast an epoch goes at a given
worker count (the resource model of :mod:`ringsched.costmodel`). Both fits
reduce to small nonnegative least squares problems solved by the active-set
method below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .costmodel import ResourceModel

__all__ = [
    "KKT_TOLERANCE",
    "DegenerateFitError",
    "InsufficientDataError",
    "LossCurveModel",
    "LossPoint",
    "NnlsNonConvergenceError",
    "NnlsProblem",
    "NnlsSolution",
    "SpeedSample",
    "fit_loss_curve",
    "fit_resource_model",
    "kkt_violation",
    "nnls",
    "remaining_epochs",
]

KKT_TOLERANCE = 1e-8


class InsufficientDataError(ValueError):
    """Too few (or too degenerate) samples to fit the requested model."""


class DegenerateFitError(ValueError):
    """The data admits no valid model (for example, a flat loss history)."""


class NnlsNonConvergenceError(RuntimeError):
    """The active-set iteration hit its bound; ``best`` holds the best iterate."""

    def __init__(self, message: str, best: "NnlsSolution"):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True, slots=True)
class LossPoint:
    """One observed (batch step, loss) pair."""

    step: int
    loss: float

    def __post_init__(self) -> None:
        if self.step < 0:
            raise ValueError(f"step must be >= 0, got {self.step}")
        if not math.isfinite(self.loss):
            raise ValueError(f"loss must be finite, got {self.loss!r}")


@dataclass(frozen=True, slots=True)
class SpeedSample:
    """One measured (worker count, epochs per second) pair."""

    workers: int
    speed: float

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if not math.isfinite(self.speed) or self.speed <= 0:
            raise ValueError(f"speed must be finite and > 0, got {self.speed!r}")


class NnlsProblem:
    """A least squares problem ``min ||A x - b||`` with ``x >= 0``.

    Rows are observations, columns are features.
    """

    def __init__(self, matrix, target):
        a = np.asarray(matrix, dtype=float)
        b = np.asarray(target, dtype=float)
        if a.ndim != 2:
            raise ValueError(f"matrix must be 2-dimensional, got shape {a.shape}")
        if b.ndim != 1:
            raise ValueError(f"target must be 1-dimensional, got shape {b.shape}")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"matrix needs at least one row and one column, got {a.shape}")
        if a.shape[0] != b.shape[0]:
            raise ValueError(f"matrix has {a.shape[0]} rows but target has {b.shape[0]} entries")
        if not np.all(np.isfinite(a)) or not np.all(np.isfinite(b)):
            raise ValueError("matrix and target entries must be finite")
        self.matrix = a
        self.target = b

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class NnlsSolution:
    """Nonnegative coefficients and the residual norm they achieve."""

    coefficients: np.ndarray
    residual_norm: float


def _solve_on(a: np.ndarray, b: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Unconstrained least squares restricted to the columns in ``idx``."""
    sub = a[:, idx]
    gram = sub.T @ sub
    rhs = sub.T @ b
    try:
        return np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(sub, b, rcond=None)[0]


def nnls(problem: NnlsProblem, *, tol: float = KKT_TOLERANCE, max_iter: int | None = None) -> NnlsSolution:
    """Solve ``min ||A x - b||`` subject to ``x >= 0`` by the active-set method.

    The returned solution satisfies the KKT conditions to within ``tol``
    relative to the gradient scale of the problem. If the iteration bound
    (3 times the column count by default) is exceeded,
    :class:`NnlsNonConvergenceError` is raised carrying the best iterate.
    """
    a = problem.matrix
    b = problem.target
    n = problem.cols
    if max_iter is None:
        max_iter = 3 * n

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    grad_scale = max(1.0, float(np.max(np.abs(a.T @ b))))
    cutoff = tol * grad_scale

    solves = 0
    while True:
        grad = a.T @ (b - a @ x)
        grad_free = np.where(passive, -np.inf, grad)
        j = int(np.argmax(grad_free))
        if passive.all() or grad_free[j] <= cutoff:
            break
        passive[j] = True
        while True:
            idx = np.flatnonzero(passive)
            trial = np.zeros(n)
            trial[idx] = _solve_on(a, b, idx)
            solves += 1
            if trial[idx].min() > 0:
                x = trial
                break
            if solves > max_iter:
                resid = float(np.linalg.norm(b - a @ x))
                best = NnlsSolution(coefficients=x, residual_norm=resid)
                raise NnlsNonConvergenceError(
                    f"active-set iteration exceeded {max_iter} subproblems", best
                )
            # Step from x toward the trial point until the first passive
            # coefficient hits zero, then retire it from the passive set.
            neg = idx[trial[idx] <= 0]
            denom = x[neg] - trial[neg]
            ratios = np.where(denom > 0, x[neg] / np.where(denom > 0, denom, 1.0), 0.0)
            step = float(ratios.min())
            x = x + step * (trial - x)
            x[neg[ratios <= step]] = 0.0
            passive &= x > 0

    resid = float(np.linalg.norm(b - a @ x))
    return NnlsSolution(coefficients=x, residual_norm=resid)


def kkt_violation(problem: NnlsProblem, solution: NnlsSolution) -> float:
    """Worst relative KKT violation of a solution.

    For zero coefficients the objective gradient must be nonnegative (the
    residual gradient ``A^T r`` nonpositive); for positive coefficients it
    must vanish. Returns the largest violation scaled by the gradient
    magnitude of the problem, so a valid solution scores <= the solver tol.
    """
    a = problem.matrix
    b = problem.target
    x = solution.coefficients
    grad = a.T @ (b - a @ x)
    grad_scale = max(1.0, float(np.max(np.abs(a.T @ b))))
    positive = x > 0
    worst = 0.0
    if positive.any():
        worst = float(np.max(np.abs(grad[positive])))
    if (~positive).any():
        worst = max(worst, float(np.max(grad[~positive])))
    return max(0.0, worst) / grad_scale


@dataclass(frozen=True, slots=True)
class LossCurveModel:
    """Fitted convergence curve ``loss(k) = 1/(beta0*k + beta1) + beta2``.

    beta0 > 0 makes the predicted loss strictly decreasing toward the
    asymptote beta2.
    """

    beta0: float
    beta1: float
    beta2: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.beta0) or self.beta0 <= 0:
            raise ValueError(f"beta0 must be > 0, got {self.beta0!r}")
        if not math.isfinite(self.beta1) or self.beta1 < 0:
            raise ValueError(f"beta1 must be >= 0, got {self.beta1!r}")
        if not math.isfinite(self.beta2) or self.beta2 < 0:
            raise ValueError(f"beta2 must be >= 0, got {self.beta2!r}")

    def loss_at(self, step: float) -> float:
        return 1.0 / (self.beta0 * step + self.beta1) + self.beta2


def _linearized_fit(ks: np.ndarray, ls: np.ndarray, beta2: float):
    """NNLS fit of (beta0, beta1) for a fixed asymptote candidate.

    Points at or below the candidate are excluded (the linearization divides
    by ``loss - beta2``). Returns None when the candidate is unusable.
    """
    mask = ls > beta2 + 1e-12
    if int(mask.sum()) < 2 or np.unique(ks[mask]).size < 2:
        return None
    y = 1.0 / (ls[mask] - beta2)
    design = np.column_stack([ks[mask], np.ones(int(mask.sum()))])
    try:
        sol = nnls(NnlsProblem(design, y))
    except NnlsNonConvergenceError as err:
        sol = err.best
    beta0, beta1 = (float(c) for c in sol.coefficients)
    if beta0 <= 0:
        return None
    denom = beta0 * ks + beta1
    if np.any(denom <= 0):
        return None
    sse = float(np.sum((ls - (1.0 / denom + beta2)) ** 2))
    return sse, beta0, beta1


def fit_loss_curve(points: Sequence[LossPoint], *, beta2_steps: int = 100) -> LossCurveModel:
    """Fit the convergence curve to observed loss points.

    The curve is nonlinear in the coefficients jointly, so the asymptote is
    grid searched (a coarse pass over [0, min loss] followed by one
    refinement pass around the winner); for each candidate the remaining two
    coefficients come from NNLS on the linearized form
    ``1/(loss - beta2) = beta0*k + beta1``, and the winner is the candidate
    with the smallest sum of squared errors in the original loss space.
    """
    if len(points) < 3:
        raise InsufficientDataError(f"need at least 3 loss points, got {len(points)}")
    ks = np.array([float(p.step) for p in points])
    ls = np.array([p.loss for p in points])
    if np.unique(ks).size < 3:
        raise InsufficientDataError("need at least 3 distinct batch steps")
    if np.any(ls <= 0):
        raise ValueError("losses must be positive")
    if float(ls.max() - ls.min()) == 0.0:
        raise DegenerateFitError("all observed losses are equal")
    if beta2_steps < 2:
        raise ValueError("beta2_steps must be >= 2")

    min_loss = float(ls.min())

    def search(lo: float, hi: float):
        best = None
        for beta2 in np.linspace(lo, hi, beta2_steps):
            fit = _linearized_fit(ks, ls, float(beta2))
            if fit is None:
                continue
            sse, beta0, beta1 = fit
            if best is None or sse < best[0]:
                best = (sse, beta0, beta1, float(beta2))
        return best

    best = search(0.0, min_loss)
    if best is None:
        raise DegenerateFitError("no asymptote candidate produced a decreasing fit")
    pitch = min_loss / (beta2_steps - 1)
    refined = search(max(0.0, best[3] - pitch), min(min_loss, best[3] + pitch))
    if refined is not None and refined[0] < best[0]:
        best = refined
    _, beta0, beta1, beta2 = best
    return LossCurveModel(beta0=beta0, beta1=beta1, beta2=beta2)


def remaining_epochs(
    model: LossCurveModel,
    current_step: float,
    *,
    convergence_margin: float = 0.01,
    steps_per_epoch: float,
) -> float:
    """Epochs left until the excess loss over the asymptote falls below the margin.

    The convergence step solves ``1/(beta0*k + beta1) = margin``; already
    converged jobs report 0.
    """
    if not math.isfinite(convergence_margin) or convergence_margin <= 0:
        raise ValueError(f"convergence_margin must be > 0, got {convergence_margin!r}")
    if steps_per_epoch < 1:
        raise ValueError(f"steps_per_epoch must be >= 1, got {steps_per_epoch!r}")
    if current_step < 0:
        raise ValueError(f"current_step must be >= 0, got {current_step!r}")
    convergence_step = (1.0 / convergence_margin - model.beta1) / model.beta0
    return max(0.0, convergence_step - current_step) / steps_per_epoch


def fit_resource_model(samples: Sequence[SpeedSample], m: float, n: float) -> ResourceModel:
    """Fit the epoch-speed model from measured (workers, speed) samples.

    Each sample contributes the row ``[m/w, w-1, (w-1)*n/w, 1]`` against the
    target ``1/speed``. Rows are scaled by their target so the solver
    minimizes relative rather than absolute residuals; measured epoch times
    span an order of magnitude between 1 and 8 workers, and an unweighted fit
    lets the slowest configuration dominate.
    """
    if m <= 0 or n <= 0:
        raise ValueError("m and n must be positive")
    distinct = {s.workers for s in samples}
    if len(distinct) < 2:
        raise InsufficientDataError(
            f"need speed samples at >= 2 distinct worker counts, got {len(distinct)}"
        )
    rows = []
    targets = []
    for sample in samples:
        w = sample.workers
        epoch_time = 1.0 / sample.speed
        scale = 1.0 / epoch_time
        rows.append([
            scale * m / w,
            scale * (w - 1),
            scale * (w - 1) * n / w,
            scale,
        ])
        targets.append(1.0)
    try:
        sol = nnls(NnlsProblem(rows, targets))
    except NnlsNonConvergenceError as err:
        sol = err.best
    t0, t1, t2, t3 = (float(c) for c in sol.coefficients)
    try:
        return ResourceModel(theta0=t0, theta1=t1, theta2=t2, theta3=t3, m=m, n=n)
    except ValueError as exc:
        raise DegenerateFitError(f"fitted coefficients are degenerate: {exc}") from exc
