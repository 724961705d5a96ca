"""Closed-form timing models for data-parallel training steps.

A training step is forward/backward compute plus one gradient all-reduce.
The three all-reduce algorithms modelled here are the ones collective
communication libraries actually run: the bandwidth-optimal ring, recursive
doubling-halving (power-of-two worker counts only), and its binary-blocks
generalization. On top of the step formulas sits the four-coefficient
speed model ``f(w) = 1 / (theta0*m/w + theta1*(w-1) + theta2*(w-1)*n/w + theta3)``
that the scheduler fits per job and queries in epochs per second.

All units are SI: seconds and bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum, unique

__all__ = [
    "DEFAULT_RING_THRESHOLD_BYTES",
    "AllReduceAlgo",
    "CommParams",
    "DegenerateModelError",
    "InvalidAlgorithmError",
    "JobProfile",
    "ResourceModel",
    "StepTimeSpeedModel",
    "allreduce_time",
    "is_power_of_two",
    "predict_speed",
    "ring_resource_model",
    "select_algorithm",
    "step_time",
]

# Above this gradient size the ring algorithm wins on bandwidth and is
# selected regardless of worker count.
DEFAULT_RING_THRESHOLD_BYTES = 10**7


class InvalidAlgorithmError(ValueError):
    """An all-reduce algorithm was requested on a worker count it cannot run on."""


class DegenerateModelError(ValueError):
    """A speed model predicted a non-positive time per epoch."""


def is_power_of_two(value: int) -> bool:
    return value >= 1 and value & (value - 1) == 0


def _check_nonneg(name: str, value: float) -> None:
    if not math.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be finite and >= 0, got {value!r}")


def _check_positive(name: str, value: float) -> None:
    if not math.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be finite and > 0, got {value!r}")


@unique
class AllReduceAlgo(Enum):
    """All-reduce algorithm choices.

    DOUBLING_HALVING is only valid when the worker count is a power of two;
    BINARY_BLOCKS generalizes it to arbitrary counts.
    """

    RING = "ring"
    DOUBLING_HALVING = "doubling-halving"
    BINARY_BLOCKS = "binary-blocks"


@dataclass(frozen=True, slots=True)
class CommParams:
    """Link coefficients of the collective-communication cost model.

    alpha: seconds of latency per message,
    beta:  seconds per byte transferred,
    gamma: seconds per byte of reduction compute.
    """

    alpha: float
    beta: float
    gamma: float

    def __post_init__(self) -> None:
        _check_nonneg("alpha", self.alpha)
        _check_nonneg("beta", self.beta)
        _check_nonneg("gamma", self.gamma)


@dataclass(frozen=True, slots=True)
class JobProfile:
    """Measured per-job constants.

    ``m`` is the global minibatch in examples per step, summed across all
    workers of the job; per-worker compute is ``m / w``. ``n`` is the model
    (gradient) size in bytes. ``t_forward`` and ``t_back`` are seconds per
    example. ``steps_per_epoch`` is taken at the reference batch size ``m``.
    """

    m: int
    n: int
    t_forward: float
    t_back: float
    steps_per_epoch: float
    comm: CommParams
    restart_cost: float = 10.0
    base_lr: float = 0.1

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        _check_positive("t_forward", self.t_forward)
        _check_positive("t_back", self.t_back)
        if not math.isfinite(self.steps_per_epoch) or self.steps_per_epoch < 1:
            raise ValueError(f"steps_per_epoch must be >= 1, got {self.steps_per_epoch}")
        _check_nonneg("restart_cost", self.restart_cost)
        _check_positive("base_lr", self.base_lr)


def allreduce_time(algo: AllReduceAlgo, workers: int, n_bytes: int, comm: CommParams) -> float:
    """Communication seconds for one all-reduce of ``n_bytes`` over ``workers``.

    Compute time is excluded. A single worker exchanges nothing, so the cost
    at ``workers == 1`` is defined as 0 for every algorithm even though the
    doubling-halving and binary-blocks formulas do not vanish there.
    """
    if workers < 1:
        raise ValueError(f"worker count must be >= 1, got {workers}")
    if n_bytes < 1:
        raise ValueError(f"n_bytes must be >= 1, got {n_bytes}")
    if algo is AllReduceAlgo.DOUBLING_HALVING and not is_power_of_two(workers):
        raise InvalidAlgorithmError(
            f"doubling-halving requires a power-of-two worker count, got {workers}"
        )
    if workers == 1:
        return 0.0
    if algo is AllReduceAlgo.RING:
        hops = workers - 1
        segment = n_bytes / workers
        return hops * 4.0 * comm.alpha + hops * segment * 4.0 * comm.beta + hops * segment * 2.0 * comm.gamma
    if algo is AllReduceAlgo.DOUBLING_HALVING:
        return 4.0 * math.log2(workers) * comm.alpha + 4.0 * n_bytes * comm.beta + 2.5 * n_bytes * comm.gamma
    if algo is AllReduceAlgo.BINARY_BLOCKS:
        rounds = 5 + 4 * math.ceil(math.log2(workers))
        return rounds * comm.alpha + 7.0 * n_bytes * comm.beta + 3.0 * n_bytes * comm.gamma
    raise InvalidAlgorithmError(f"unknown all-reduce algorithm {algo!r}")


def step_time(profile: JobProfile, workers: int, algo: AllReduceAlgo) -> float:
    """Seconds for one minibatch: data-parallel compute plus the all-reduce.

    The global minibatch is split across workers, so the compute term is
    ``m * (t_forward + t_back) / w``.
    """
    compute = profile.m * (profile.t_forward + profile.t_back) / workers
    return compute + allreduce_time(algo, workers, profile.n, profile.comm)


def select_algorithm(
    workers: int,
    n_bytes: int,
    n_threshold: int = DEFAULT_RING_THRESHOLD_BYTES,
) -> AllReduceAlgo:
    """Pick the all-reduce algorithm a collective library would use.

    Large gradients go to the bandwidth-optimal ring; below the threshold the
    low-latency doubling-halving is used when the worker count is a power of
    two and binary blocks otherwise.
    """
    if workers < 1:
        raise ValueError(f"worker count must be >= 1, got {workers}")
    if n_bytes < 1:
        raise ValueError(f"n_bytes must be >= 1, got {n_bytes}")
    if n_bytes > n_threshold:
        return AllReduceAlgo.RING
    if is_power_of_two(workers):
        return AllReduceAlgo.DOUBLING_HALVING
    return AllReduceAlgo.BINARY_BLOCKS


@dataclass(frozen=True, slots=True)
class ResourceModel:
    """Fitted speed model: time per epoch as a function of the worker count.

    ``m`` and ``n`` are the minibatch size and model bytes the coefficients
    were fitted against. The thetas absorb steps-per-epoch scaling, so
    ``speed(w)`` is directly in epochs per second.
    """

    theta0: float
    theta1: float
    theta2: float
    theta3: float
    m: float
    n: float

    def __post_init__(self) -> None:
        for name in ("theta0", "theta1", "theta2", "theta3"):
            _check_nonneg(name, getattr(self, name))
        _check_positive("m", self.m)
        _check_positive("n", self.n)
        if self.theta0 * self.m + self.theta3 <= 0:
            raise ValueError("model is degenerate: theta0*m and theta3 are both zero")

    def time_per_epoch(self, workers: int) -> float:
        if workers < 1:
            raise ValueError(f"worker count must be >= 1, got {workers}")
        extra = workers - 1
        inner = (
            self.theta0 * (self.m / workers)
            + self.theta1 * extra
            + self.theta2 * extra * (self.n / workers)
            + self.theta3
        )
        if inner <= 0:
            raise DegenerateModelError(f"non-positive predicted epoch time at w={workers}")
        return inner

    def speed(self, workers: int) -> float:
        """Epochs per second at the given worker count."""
        return 1.0 / self.time_per_epoch(workers)


def predict_speed(model: ResourceModel, workers: int) -> float:
    """Epochs per second predicted by a fitted resource model."""
    return model.speed(workers)


@dataclass(frozen=True, slots=True)
class StepTimeSpeedModel:
    """Speed model evaluated directly from a profile's step-time formulas.

    Unlike :class:`ResourceModel` this switches all-reduce algorithm per
    worker count, so it reproduces the cliffs at non-power-of-two counts
    (for example 8 -> 9 workers falling back to binary blocks).
    """

    profile: JobProfile
    ring_threshold_bytes: int = DEFAULT_RING_THRESHOLD_BYTES

    def time_per_epoch(self, workers: int) -> float:
        algo = select_algorithm(workers, self.profile.n, self.ring_threshold_bytes)
        return self.profile.steps_per_epoch * step_time(self.profile, workers, algo)

    def speed(self, workers: int) -> float:
        return 1.0 / self.time_per_epoch(workers)


def ring_resource_model(profile: JobProfile) -> ResourceModel:
    """Exact ResourceModel equivalent of a profile under the ring algorithm.

    The ring step time is affine in the model's basis functions, so the
    mapping is exact: 1/speed(w) equals steps_per_epoch * step_time(w) for
    every worker count.
    """
    s = profile.steps_per_epoch
    return ResourceModel(
        theta0=s * (profile.t_forward + profile.t_back),
        theta1=s * 4.0 * profile.comm.alpha,
        theta2=s * (4.0 * profile.comm.beta + 2.0 * profile.comm.gamma),
        theta3=0.0,
        m=profile.m,
        n=profile.n,
    )
