"""GPU allocation for concurrent training jobs.

Each scheduling interval the cluster solves: minimize the summed predicted
completion times ``sum_j Q_j / f_j(w_j)`` subject to ``sum_j w_j <= C`` with
integer ``w_j >= 1``. The problem is nonconvex and NP-hard, so production
allocation uses heuristics; an exact dynamic-programming solver is kept as a
test oracle for small instances.

The main heuristic grows allocations only in doublings, ranked by average
marginal gain per added GPU. Collective all-reduce performance makes some
single-GPU increments counterproductive (9 workers run the slower
binary-blocks algorithm while 8 and 16 run doubling-halving), and a unit-step
greedy stalls on that cliff even when the larger power of two is globally
better.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

__all__ = [
    "AllocationPlan",
    "ClusterConfig",
    "InfeasiblePlacementError",
    "InstanceTooLargeError",
    "JobState",
    "OverCapacityError",
    "Placement",
    "SpeedModel",
    "continue_doubling",
    "doubling_allocate",
    "greedy_allocate",
    "optimal_allocate_dp",
    "place_tasks",
]

DP_MAX_JOBS = 16
DP_MAX_CAPACITY = 64


class OverCapacityError(ValueError):
    """More jobs than GPUs; the caller must queue the excess (FIFO by arrival)."""


class InstanceTooLargeError(ValueError):
    """The exact solver is limited to small instances."""


class InfeasiblePlacementError(ValueError):
    """The plan does not fit on the cluster's nodes."""


class SpeedModel(Protocol):
    """Anything that predicts epochs per second at a worker count."""

    def speed(self, workers: int) -> float: ...


@dataclass(frozen=True, slots=True)
class JobState:
    """A live job as the allocator sees it.

    ``remaining_epochs`` is the predicted work left, ``model`` the fitted (or
    exact) speed model, ``workers`` the current allocation (0 when queued).
    ``max_workers`` of None means no cap beyond cluster capacity.
    """

    job_id: int
    remaining_epochs: float
    model: SpeedModel
    workers: int = 0
    arrival_time: float = 0.0
    max_workers: int | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.remaining_epochs) or self.remaining_epochs < 0:
            raise ValueError(f"remaining_epochs must be >= 0, got {self.remaining_epochs!r}")
        if self.workers < 0:
            raise ValueError(f"workers must be >= 0, got {self.workers}")
        if self.max_workers is not None:
            if self.max_workers < 1:
                raise ValueError(f"max_workers must be >= 1, got {self.max_workers}")
            if self.workers > self.max_workers:
                raise ValueError(f"workers {self.workers} exceeds max_workers {self.max_workers}")


@dataclass(frozen=True)
class AllocationPlan:
    """Worker counts per job plus the completion times they predict."""

    workers: dict[int, int]
    predicted_seconds: dict[int, float]
    objective_seconds: float

    def total_workers(self) -> int:
        return sum(self.workers.values())


@dataclass(frozen=True, slots=True)
class ClusterConfig:
    """Homogeneous cluster: ``node_count`` nodes of ``gpus_per_node`` GPUs."""

    gpus_per_node: int
    node_count: int

    def __post_init__(self) -> None:
        if self.gpus_per_node < 1 or self.node_count < 1:
            raise ValueError("gpus_per_node and node_count must be >= 1")

    @property
    def capacity(self) -> int:
        return self.gpus_per_node * self.node_count


@dataclass(frozen=True)
class Placement:
    """Per-job (node, gpu count) assignments."""

    assignments: dict[int, tuple[tuple[int, int], ...]]

    def gpus_of(self, job_id: int) -> int:
        return sum(count for _, count in self.assignments[job_id])


def _predicted_time(job: JobState, workers: int) -> float:
    if job.remaining_epochs == 0.0:
        return 0.0
    return job.remaining_epochs / job.model.speed(workers)


def _effective_cap(job: JobState, capacity: int) -> int:
    if job.max_workers is None:
        return capacity
    return min(job.max_workers, capacity)


def _build_plan(jobs: Sequence[JobState], allocation: Mapping[int, int]) -> AllocationPlan:
    workers = {job.job_id: allocation[job.job_id] for job in jobs}
    predicted = {job.job_id: _predicted_time(job, workers[job.job_id]) for job in jobs}
    return AllocationPlan(
        workers=workers,
        predicted_seconds=predicted,
        objective_seconds=sum(predicted.values()),
    )


def _check_jobs(jobs: Sequence[JobState], capacity: int) -> None:
    if capacity < 1:
        raise ValueError(f"capacity must be >= 1, got {capacity}")
    ids = [job.job_id for job in jobs]
    if len(set(ids)) != len(ids):
        raise ValueError("job ids must be unique")
    if capacity < len(jobs):
        raise OverCapacityError(
            f"capacity {capacity} cannot give {len(jobs)} jobs one worker each"
        )


def continue_doubling(
    jobs: Sequence[JobState],
    capacity: int,
    current: Mapping[int, int],
) -> AllocationPlan:
    """Run the doubling pass starting from an existing allocation.

    Repeatedly doubles the job with the largest positive average marginal
    gain ``(Q/f(w) - Q/f(2w)) / w`` among jobs whose doubled allocation fits
    both their cap and the remaining capacity; ties go to the earliest
    arrival, then the smallest job id. Gains are recomputed after every
    single doubling.
    """
    _check_jobs(jobs, capacity)
    allocation = {}
    for job in jobs:
        start = current[job.job_id]
        if start < 1:
            raise ValueError(f"job {job.job_id} must start with >= 1 worker, got {start}")
        allocation[job.job_id] = start
    used = sum(allocation.values())
    if used > capacity:
        raise OverCapacityError(f"starting allocation uses {used} of {capacity} GPUs")

    while True:
        free = capacity - used
        if free < 1:
            break
        best = None
        for job in jobs:
            w = allocation[job.job_id]
            if w > free:
                continue
            if 2 * w > _effective_cap(job, capacity):
                continue
            gain = (_predicted_time(job, w) - _predicted_time(job, 2 * w)) / w
            if gain <= 0:
                continue
            key = (-gain, job.arrival_time, job.job_id)
            if best is None or key < best[0]:
                best = (key, job)
        if best is None:
            break
        chosen = best[1]
        used += allocation[chosen.job_id]
        allocation[chosen.job_id] *= 2
    return _build_plan(jobs, allocation)


def doubling_allocate(jobs: Sequence[JobState], capacity: int) -> AllocationPlan:
    """Allocate by the doubling heuristic: one worker each, then double by gain.

    All resulting worker counts are powers of two.
    """
    if not jobs:
        return AllocationPlan(workers={}, predicted_seconds={}, objective_seconds=0.0)
    return continue_doubling(jobs, capacity, {job.job_id: 1 for job in jobs})


def greedy_allocate(jobs: Sequence[JobState], capacity: int) -> AllocationPlan:
    """Unit-step baseline: repeatedly add one worker to the best marginal job.

    The gain of a single added worker is ``Q/f(w) - Q/f(w+1)``; allocation
    stops when capacity runs out or no job improves. Tie-breaking matches
    :func:`doubling_allocate`.
    """
    if not jobs:
        return AllocationPlan(workers={}, predicted_seconds={}, objective_seconds=0.0)
    _check_jobs(jobs, capacity)
    allocation = {job.job_id: 1 for job in jobs}
    used = len(jobs)
    while used < capacity:
        best = None
        for job in jobs:
            w = allocation[job.job_id]
            if w + 1 > _effective_cap(job, capacity):
                continue
            gain = _predicted_time(job, w) - _predicted_time(job, w + 1)
            if gain <= 0:
                continue
            key = (-gain, job.arrival_time, job.job_id)
            if best is None or key < best[0]:
                best = (key, job)
        if best is None:
            break
        allocation[best[1].job_id] += 1
        used += 1
    return _build_plan(jobs, allocation)


def optimal_allocate_dp(
    jobs: Sequence[JobState],
    capacity: int,
    *,
    power_of_two_only: bool = False,
) -> AllocationPlan:
    """Exact minimum of the allocation objective, by dynamic programming.

    Solves over (job prefix, capacity used) states; intended as an oracle for
    small instances and bounded accordingly. With ``power_of_two_only`` the
    per-job worker counts are restricted to powers of two, matching the
    doubling heuristic's search space. Capacity may go unused when extra
    workers would slow a job down. When several plans tie, earlier jobs
    prefer smaller worker counts.
    """
    if not jobs:
        return AllocationPlan(workers={}, predicted_seconds={}, objective_seconds=0.0)
    if len(jobs) > DP_MAX_JOBS or capacity > DP_MAX_CAPACITY:
        raise InstanceTooLargeError(
            f"exact solver is limited to {DP_MAX_JOBS} jobs and capacity {DP_MAX_CAPACITY}, "
            f"got {len(jobs)} jobs and capacity {capacity}"
        )
    _check_jobs(jobs, capacity)

    options: list[list[tuple[int, float]]] = []
    for job in jobs:
        cap = _effective_cap(job, capacity)
        choices = [
            (w, _predicted_time(job, w))
            for w in range(1, cap + 1)
            if not power_of_two_only or w & (w - 1) == 0
        ]
        options.append(choices)

    count = len(jobs)
    inf = math.inf
    # best[j][c]: minimal objective for jobs j.. with c GPUs available.
    best = [[inf] * (capacity + 1) for _ in range(count + 1)]
    best[count] = [0.0] * (capacity + 1)
    for j in range(count - 1, -1, -1):
        row = best[j]
        nxt = best[j + 1]
        for c in range(count - j, capacity + 1):
            acc = inf
            for w, t in options[j]:
                if w > c:
                    break
                tail = nxt[c - w]
                if tail == inf:
                    continue
                total = t + tail
                if total < acc:
                    acc = total
            row[c] = acc

    if best[0][capacity] == inf:
        raise OverCapacityError("no feasible assignment of one worker per job")

    allocation: dict[int, int] = {}
    c = capacity
    for j, job in enumerate(jobs):
        target = best[j][c]
        for w, t in options[j]:
            if w > c:
                break
            tail = best[j + 1][c - w]
            if tail != inf and t + tail == target:
                allocation[job.job_id] = w
                c -= w
                break
        else:  # pragma: no cover - the forward pass guarantees a match
            raise RuntimeError("DP reconstruction failed")
    return _build_plan(jobs, allocation)


def place_tasks(plan: AllocationPlan, cluster: ClusterConfig) -> Placement:
    """First-fit-decreasing placement of a plan's worker counts onto nodes.

    Jobs are placed largest first. A job that fits on one node goes to the
    first node with room; otherwise it spans the minimum achievable number of
    nodes given the current free slots (largest free counts first).
    Deterministic for a given plan.
    """
    if plan.total_workers() > cluster.capacity:
        raise InfeasiblePlacementError(
            f"plan needs {plan.total_workers()} GPUs but the cluster has {cluster.capacity}"
        )
    free = [cluster.gpus_per_node] * cluster.node_count
    assignments: dict[int, tuple[tuple[int, int], ...]] = {}
    for job_id, need in sorted(plan.workers.items(), key=lambda kv: (-kv[1], kv[0])):
        if need > sum(free):
            raise InfeasiblePlacementError(
                f"job {job_id} needs {need} GPUs but only {sum(free)} are free"
            )
        parts: list[tuple[int, int]] = []
        single = next((i for i, slots in enumerate(free) if slots >= need), None)
        if single is not None:
            free[single] -= need
            parts.append((single, need))
        else:
            remaining = need
            for node in sorted(range(len(free)), key=lambda i: (-free[i], i)):
                if remaining == 0:
                    break
                take = min(free[node], remaining)
                if take == 0:
                    continue
                free[node] -= take
                remaining -= take
                parts.append((node, take))
        assignments[job_id] = tuple(sorted(parts))
    ordered = {job_id: assignments[job_id] for job_id in plan.workers}
    return Placement(assignments=ordered)
