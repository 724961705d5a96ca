"""Seeded discrete-event simulation of a shared GPU cluster.

Jobs arrive as a Poisson process and are (re)allocated at periodic scheduling
ticks according to a strategy: fixed worker counts with FIFO queueing, or the
adaptive pool that floors every admitted job at one worker and grows
allocations by the doubling heuristic. A job that changes worker count pays a
restart pause during which its GPUs stay held but no progress accrues; no
accrued progress is ever lost. Ground-truth job speed comes from each job's
profile under the ring cost model, which the four-coefficient resource model
expresses exactly.

Time is continuous (seconds as doubles); the only discretization is the event
set itself. Runs are deterministic: simultaneous events are ordered by kind
(completion, arrival, tick, restart-complete) and then job id.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from .allocator import ClusterConfig, JobState, continue_doubling, doubling_allocate
from .costmodel import ResourceModel, ring_resource_model
from .fitting import (
    DegenerateFitError,
    InsufficientDataError,
    LossCurveModel,
    LossPoint,
    SpeedSample,
    fit_loss_curve,
    fit_resource_model,
    remaining_epochs,
)
from .workload import JobSpec, exponential_arrivals

__all__ = [
    "EventKind",
    "ForcedRescale",
    "JobRecord",
    "SimConfig",
    "SimEvent",
    "SimReport",
    "SimulationError",
    "Strategy",
    "explore_workers",
    "generate_arrivals",
    "run_simulation",
]


class SimulationError(RuntimeError):
    """The simulation reached an inconsistent state (a bug, not bad input)."""


class EventKind(IntEnum):
    """Event kinds; the integer value is the tie-break rank at equal timestamps."""

    JOB_COMPLETION = 0
    JOB_ARRIVAL = 1
    SCHEDULE_TICK = 2
    RESTART_COMPLETE = 3


@dataclass(frozen=True, slots=True)
class SimEvent:
    """One simulation event; orderable by (time, kind, job id)."""

    time_s: float
    kind: EventKind
    job_id: int = -1

    def sort_key(self) -> tuple[float, int, int]:
        return (self.time_s, int(self.kind), self.job_id)


_FIXED_CHOICES = (1, 2, 4, 8)


@dataclass(frozen=True, slots=True)
class Strategy:
    """Scheduling strategy: ``precompute``, ``exploratory`` or ``fixed``.

    Precompute assumes speed and convergence models are known when a job
    arrives. Exploratory reserves eight GPUs for a job's first ten minutes,
    running 2.5 minutes at each of 1, 2, 4 and 8 workers to gather speed
    samples before joining the adaptive pool. Fixed(k) requests exactly k
    GPUs for the job's lifetime.
    """

    kind: str
    fixed_workers: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("precompute", "exploratory", "fixed"):
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "fixed":
            if self.fixed_workers not in _FIXED_CHOICES:
                raise ValueError(
                    f"fixed strategy needs workers in {_FIXED_CHOICES}, got {self.fixed_workers!r}"
                )
        elif self.fixed_workers is not None:
            raise ValueError(f"{self.kind} strategy takes no worker count")

    @classmethod
    def precompute(cls) -> "Strategy":
        return cls(kind="precompute")

    @classmethod
    def exploratory(cls) -> "Strategy":
        return cls(kind="exploratory")

    @classmethod
    def fixed(cls, workers: int) -> "Strategy":
        return cls(kind="fixed", fixed_workers=workers)

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        name = text.strip().lower()
        if name == "precompute":
            return cls.precompute()
        if name == "exploratory":
            return cls.exploratory()
        if name.startswith("fixed"):
            try:
                return cls.fixed(int(name[len("fixed"):]))
            except ValueError:
                pass
        valid = ["precompute", "exploratory"] + [f"fixed{k}" for k in _FIXED_CHOICES]
        raise ValueError(f"unknown strategy {text!r}; valid strategies: {', '.join(valid)}")

    @property
    def label(self) -> str:
        if self.kind == "fixed":
            return f"fixed{self.fixed_workers}"
        return self.kind


@dataclass(frozen=True, slots=True)
class ForcedRescale:
    """Externally imposed reallocation once a job reaches an epoch mark."""

    job_id: int
    at_epochs: float
    workers: int

    def __post_init__(self) -> None:
        if self.at_epochs < 0 or self.workers < 1:
            raise ValueError("at_epochs must be >= 0 and workers >= 1")


@dataclass(frozen=True, slots=True)
class SimConfig:
    """Everything a simulation run depends on besides the workload itself."""

    strategy: Strategy
    cluster: ClusterConfig = ClusterConfig(gpus_per_node=8, node_count=8)
    scheduling_interval_s: float = 60.0
    restart_cost_s: float | None = None  # None: use each job profile's value
    rng_seed: int = 0
    mean_interarrival_s: float = 500.0
    total_jobs: int = 1
    convergence_margin: float = 0.01
    grow_only: bool = True
    explore_window_s: float = 150.0
    explore_ladder: tuple[int, ...] = (1, 2, 4, 8)
    explore_reserve: int = 8
    forced_rescales: tuple[ForcedRescale, ...] = ()
    max_events: int = 50_000_000

    def __post_init__(self) -> None:
        if self.scheduling_interval_s <= 0:
            raise ValueError("scheduling_interval_s must be > 0")
        if self.restart_cost_s is not None and self.restart_cost_s < 0:
            raise ValueError("restart_cost_s must be >= 0")
        if self.mean_interarrival_s <= 0:
            raise ValueError("mean_interarrival_s must be > 0")
        if self.total_jobs < 1:
            raise ValueError("total_jobs must be >= 1")
        if self.convergence_margin <= 0 or self.convergence_margin >= 1:
            raise ValueError("convergence_margin must be in (0, 1)")
        if self.explore_window_s <= 0:
            raise ValueError("explore_window_s must be > 0")
        if not self.explore_ladder or any(w < 1 for w in self.explore_ladder):
            raise ValueError("explore_ladder must hold positive worker counts")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.label,
            "gpus_per_node": self.cluster.gpus_per_node,
            "node_count": self.cluster.node_count,
            "capacity": self.cluster.capacity,
            "scheduling_interval_s": self.scheduling_interval_s,
            "restart_cost_s": self.restart_cost_s,
            "rng_seed": self.rng_seed,
            "mean_interarrival_s": self.mean_interarrival_s,
            "total_jobs": self.total_jobs,
            "convergence_margin": self.convergence_margin,
            "grow_only": self.grow_only,
            "explore_window_s": self.explore_window_s,
            "explore_ladder": list(self.explore_ladder),
            "explore_reserve": self.explore_reserve,
            "forced_rescales": [
                {"job_id": fr.job_id, "at_epochs": fr.at_epochs, "workers": fr.workers}
                for fr in self.forced_rescales
            ],
        }


@dataclass(frozen=True, slots=True)
class JobRecord:
    """Per-job outcome of a run."""

    job_id: int
    arrival_s: float
    start_s: float
    completion_s: float
    restarts: int
    paused_s: float
    gpu_seconds: float
    epochs: float

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "arrival_s": self.arrival_s,
            "start_s": self.start_s,
            "completion_s": self.completion_s,
            "restarts": self.restarts,
            "paused_s": self.paused_s,
            "gpu_seconds": self.gpu_seconds,
            "epochs": self.epochs,
        }


@dataclass(frozen=True)
class SimReport:
    """Per-job records and aggregate statistics of one simulation run."""

    records: tuple[JobRecord, ...]
    total_jobs: int
    mean_completion_hours: float
    peak_simultaneous_jobs: int
    peak_allocated_gpus: int
    capacity: int
    makespan_s: float
    total_gpu_seconds: float
    total_restarts: int
    events_processed: int

    def to_dict(self) -> dict:
        return {
            "total_jobs": self.total_jobs,
            "mean_completion_hours": self.mean_completion_hours,
            "peak_simultaneous_jobs": self.peak_simultaneous_jobs,
            "peak_allocated_gpus": self.peak_allocated_gpus,
            "capacity": self.capacity,
            "makespan_s": self.makespan_s,
            "total_gpu_seconds": self.total_gpu_seconds,
            "total_restarts": self.total_restarts,
            "events_processed": self.events_processed,
            "jobs": [record.to_dict() for record in self.records],
        }


def generate_arrivals(mean_interarrival_s: float, total_jobs: int, seed: int) -> list[float]:
    """Seeded Poisson-process arrival timestamps (cumulative exponential gaps)."""
    rng = np.random.default_rng(seed)
    return exponential_arrivals(mean_interarrival_s, total_jobs, rng)


def explore_workers(
    age_s: float,
    *,
    window_s: float = 150.0,
    ladder: tuple[int, ...] = (1, 2, 4, 8),
) -> int | None:
    """Worker count of the exploration ladder at a given job age.

    Returns one ladder rung per consecutive window and None once the
    exploration phase is over (the job then joins the adaptive pool).
    """
    if age_s < 0:
        raise ValueError(f"age_s must be >= 0, got {age_s}")
    index = int(age_s // window_s)
    if index < len(ladder):
        return ladder[index]
    return None


# Lifecycle states of a simulated job.
_PENDING, _QUEUED, _EXPLORING, _RUNNING, _DONE = range(5)


class _Job:
    __slots__ = (
        "spec", "truth", "loss_true", "state", "workers", "reserved",
        "accrued", "anchor", "pause_until", "speed_now",
        "start_s", "completion_s", "restarts", "paused_s",
        "gpu_seconds", "alloc_anchor", "version",
        "window_start_t", "window_start_accrued", "window_start_paused",
        "samples", "loss_points", "sched_model", "sched_loss",
    )

    def __init__(self, spec: JobSpec, convergence_margin: float):
        self.spec = spec
        self.truth = ring_resource_model(spec.profile)
        # Synthetic ground-truth loss curve consistent with the job's true
        # convergence point: the excess loss hits the margin exactly at
        # true_epochs * steps_per_epoch.
        steps_total = spec.true_epochs * spec.profile.steps_per_epoch
        beta0 = (1.0 / convergence_margin - 1.0) / steps_total
        self.loss_true = LossCurveModel(beta0=beta0, beta1=1.0, beta2=0.1)
        self.state = _PENDING
        self.workers = 0
        self.reserved = 0
        self.accrued = 0.0
        self.anchor = 0.0
        self.pause_until = -math.inf
        self.speed_now = 0.0
        self.start_s = None
        self.completion_s = None
        self.restarts = 0
        self.paused_s = 0.0
        self.gpu_seconds = 0.0
        self.alloc_anchor = 0.0
        self.version = 0
        self.window_start_t = 0.0
        self.window_start_accrued = 0.0
        self.window_start_paused = 0.0
        self.samples: list[SpeedSample] = []
        self.loss_points: list[LossPoint] = []
        self.sched_model = None
        self.sched_loss = None

    @property
    def allocated(self) -> int:
        return self.reserved if self.reserved else self.workers


class _Simulation:
    def __init__(self, config: SimConfig, jobs: Sequence[JobSpec]):
        if not jobs:
            raise ValueError("workload must hold at least one job")
        ids = [job.job_id for job in jobs]
        if len(set(ids)) != len(ids):
            raise ValueError("job ids must be unique")
        self.config = config
        self.capacity = config.cluster.capacity
        strategy = config.strategy
        if strategy.kind == "fixed" and strategy.fixed_workers > self.capacity:
            raise ValueError(
                f"fixed{strategy.fixed_workers} cannot run on a {self.capacity}-GPU cluster"
            )
        self.reserve = min(config.explore_reserve, self.capacity)
        self.ladder = tuple(min(w, self.capacity) for w in config.explore_ladder)
        self.jobs = {job.job_id: _Job(job, config.convergence_margin) for job in jobs}
        self.order = sorted(self.jobs.values(), key=lambda j: j.spec.job_id)
        self.queue: list[_Job] = []
        self.heap: list[tuple[float, int, int, int]] = []
        self.now = 0.0
        self.used = 0
        self.active = 0
        self.done = 0
        self.peak_used = 0
        self.peak_active = 0
        self.events = 0
        self.forced_done: set[int] = set()

    # -- bookkeeping ---------------------------------------------------

    def _push(self, time_s: float, kind: EventKind, job_id: int, version: int) -> None:
        heapq.heappush(self.heap, (time_s, int(kind), job_id, version))

    def _progress(self, job: _Job, t: float) -> None:
        """Integrate epochs up to ``t`` at the job's current speed."""
        if job.workers >= 1 and job.state in (_EXPLORING, _RUNNING):
            begin = max(job.anchor, job.pause_until)
            if t > begin:
                job.accrued += (t - begin) * job.speed_now
        job.anchor = t

    def _account_gpu(self, job: _Job, t: float) -> None:
        if job.allocated and t > job.alloc_anchor:
            job.gpu_seconds += job.allocated * (t - job.alloc_anchor)
        job.alloc_anchor = t

    def _set_alloc(self, job: _Job, t: float, *, workers: int | None = None, reserved: int | None = None) -> None:
        self._progress(job, t)
        self._account_gpu(job, t)
        before = job.allocated
        if workers is not None:
            job.workers = workers
        if reserved is not None:
            job.reserved = reserved
        self.used += job.allocated - before

    def _restart_cost(self, job: _Job) -> float:
        if self.config.restart_cost_s is not None:
            return self.config.restart_cost_s
        return job.spec.profile.restart_cost

    def _schedule_completion(self, job: _Job, from_t: float) -> None:
        remaining = max(0.0, job.spec.true_epochs - job.accrued)
        self._push(from_t + remaining / job.speed_now, EventKind.JOB_COMPLETION, job.spec.job_id, job.version)

    # -- exploration ---------------------------------------------------

    def _open_window(self, job: _Job, t: float) -> None:
        job.window_start_t = t
        job.window_start_accrued = job.accrued
        job.window_start_paused = job.paused_s

    def _close_window(self, job: _Job, t: float) -> None:
        self._progress(job, t)
        active = (t - job.window_start_t) - (job.paused_s - job.window_start_paused)
        gained = job.accrued - job.window_start_accrued
        if active > 1e-9 and gained > 0:
            job.samples.append(SpeedSample(workers=job.workers, speed=gained / active))

    def _observe_loss(self, job: _Job, t: float) -> None:
        self._progress(job, t)
        step = int(job.accrued * job.spec.profile.steps_per_epoch)
        if not job.loss_points or step > job.loss_points[-1].step:
            job.loss_points.append(LossPoint(step=step, loss=job.loss_true.loss_at(step)))

    def _fit_models(self, job: _Job) -> None:
        profile = job.spec.profile
        try:
            job.sched_model = fit_resource_model(job.samples, m=profile.m, n=profile.n)
        except (InsufficientDataError, DegenerateFitError):
            job.sched_model = job.truth
        try:
            job.sched_loss = fit_loss_curve(job.loss_points)
        except (InsufficientDataError, DegenerateFitError):
            job.sched_loss = job.loss_true

    # -- scheduling tick -----------------------------------------------

    def _on_tick(self, t: float) -> None:
        if self.done >= len(self.jobs):
            return
        prev = {
            job.spec.job_id: job.workers
            for job in self.order
            if job.state in (_EXPLORING, _RUNNING)
        }
        if self.config.strategy.kind == "fixed":
            self._admit_fixed(t)
        else:
            self._pool_tick(t)
        self._apply_forced(t)
        self._finalize(t, prev)
        self._push(t + self.config.scheduling_interval_s, EventKind.SCHEDULE_TICK, -1, 0)

    def _admit_fixed(self, t: float) -> None:
        need = self.config.strategy.fixed_workers
        while self.queue and self.capacity - self.used >= need:
            job = self.queue.pop(0)
            job.state = _RUNNING
            self._set_alloc(job, t, workers=need)

    def _pool_tick(self, t: float) -> None:
        exploratory = self.config.strategy.kind == "exploratory"
        if exploratory:
            for job in self.order:
                if job.state != _EXPLORING:
                    continue
                self._observe_loss(job, t)
                rung = explore_workers(
                    t - job.start_s, window_s=self.config.explore_window_s, ladder=self.ladder
                )
                if rung is None:
                    self._close_window(job, t)
                    self._fit_models(job)
                    job.state = _RUNNING
                    self._set_alloc(job, t, workers=1, reserved=0)
                elif rung != job.workers:
                    self._close_window(job, t)
                    self._set_alloc(job, t, workers=rung)
                    self._open_window(job, t)
            while self.queue and self.capacity - self.used >= self.reserve:
                job = self.queue.pop(0)
                job.state = _EXPLORING
                job.start_s = t
                self._set_alloc(job, t, workers=self.ladder[0], reserved=self.reserve)
                self._open_window(job, t)
                self._observe_loss(job, t)
        else:
            while self.queue and self.capacity - self.used >= 1:
                job = self.queue.pop(0)
                job.state = _RUNNING
                # Models are assumed precomputed by arrival: the scheduler is
                # handed the exact speed and convergence curves.
                job.sched_model = job.truth
                job.sched_loss = job.loss_true
                self._set_alloc(job, t, workers=1)

        pool = [job for job in self.order if job.state == _RUNNING]
        free = self.capacity - self.used
        if not pool or free < 1:
            return
        states = []
        current = {}
        for job in pool:
            self._progress(job, t)
            step = job.accrued * job.spec.profile.steps_per_epoch
            predicted = remaining_epochs(
                job.sched_loss,
                step,
                convergence_margin=self.config.convergence_margin,
                steps_per_epoch=job.spec.profile.steps_per_epoch,
            )
            states.append(
                JobState(
                    job_id=job.spec.job_id,
                    remaining_epochs=predicted,
                    model=job.sched_model,
                    workers=job.workers,
                    arrival_time=job.spec.arrival_s,
                    max_workers=min(job.spec.max_workers, self.capacity),
                )
            )
            current[job.spec.job_id] = job.workers
        pool_capacity = sum(current.values()) + free
        if self.config.grow_only:
            plan = continue_doubling(states, pool_capacity, current)
        else:
            plan = doubling_allocate(states, pool_capacity)
        for job in pool:
            target = plan.workers[job.spec.job_id]
            if target != job.workers:
                self._set_alloc(job, t, workers=target)

    def _apply_forced(self, t: float) -> None:
        for index, forced in enumerate(self.config.forced_rescales):
            if index in self.forced_done:
                continue
            job = self.jobs.get(forced.job_id)
            if job is None or job.state not in (_EXPLORING, _RUNNING):
                continue
            self._progress(job, t)
            if job.accrued < forced.at_epochs:
                continue
            extra = forced.workers - job.allocated
            if extra <= self.capacity - self.used:
                self._set_alloc(job, t, workers=forced.workers, reserved=0)
                self.forced_done.add(index)

    def _finalize(self, t: float, prev: dict[int, int]) -> None:
        for job in self.order:
            if job.state not in (_EXPLORING, _RUNNING):
                continue
            before = prev.get(job.spec.job_id, 0)
            after = job.workers
            if after == before:
                continue
            job.version += 1
            job.speed_now = job.truth.speed(after)
            if before == 0:
                if job.start_s is None:
                    job.start_s = t
                self._schedule_completion(job, t)
            else:
                cost = self._restart_cost(job)
                job.pause_until = t + cost
                job.paused_s += cost
                job.restarts += 1
                self._push(job.pause_until, EventKind.RESTART_COMPLETE, job.spec.job_id, job.version)

    # -- other events ----------------------------------------------------

    def _on_arrival(self, job: _Job) -> None:
        job.state = _QUEUED
        self.queue.append(job)
        self.active += 1
        self.peak_active = max(self.peak_active, self.active)

    def _on_completion(self, t: float, job: _Job, version: int) -> None:
        if job.state == _DONE or version != job.version:
            return
        job.accrued = job.spec.true_epochs
        job.state = _DONE
        job.completion_s = t
        self._account_gpu(job, t)
        self.used -= job.allocated
        job.workers = 0
        job.reserved = 0
        job.speed_now = 0.0
        self.active -= 1
        self.done += 1

    def _on_restart_complete(self, t: float, job: _Job, version: int) -> None:
        if job.state == _DONE or version != job.version:
            return
        self._schedule_completion(job, t)

    # -- main loop -------------------------------------------------------

    def run(self) -> SimReport:
        for job in self.order:
            self._push(job.spec.arrival_s, EventKind.JOB_ARRIVAL, job.spec.job_id, 0)
        self._push(0.0, EventKind.SCHEDULE_TICK, -1, 0)

        while self.heap:
            t, kind, job_id, version = heapq.heappop(self.heap)
            if t < self.now - 1e-9:
                raise SimulationError(f"event time went backwards: {t} < {self.now}")
            self.now = max(self.now, t)
            self.events += 1
            if self.events > self.config.max_events:
                raise SimulationError(f"exceeded {self.config.max_events} events; runaway simulation")
            if kind == EventKind.JOB_COMPLETION:
                self._on_completion(t, self.jobs[job_id], version)
            elif kind == EventKind.JOB_ARRIVAL:
                self._on_arrival(self.jobs[job_id])
            elif kind == EventKind.SCHEDULE_TICK:
                self._on_tick(t)
            else:
                self._on_restart_complete(t, self.jobs[job_id], version)
            if self.used > self.capacity or self.used < 0:
                raise SimulationError(
                    f"capacity audit failed at t={t}: {self.used} GPUs allocated of {self.capacity}"
                )
            self.peak_used = max(self.peak_used, self.used)

        incomplete = [job.spec.job_id for job in self.order if job.state != _DONE]
        if incomplete:
            raise SimulationError(f"jobs never completed: {incomplete[:5]}")

        records = tuple(
            JobRecord(
                job_id=job.spec.job_id,
                arrival_s=job.spec.arrival_s,
                start_s=job.start_s,
                completion_s=job.completion_s,
                restarts=job.restarts,
                paused_s=job.paused_s,
                gpu_seconds=job.gpu_seconds,
                epochs=job.accrued,
            )
            for job in self.order
        )
        completions = [r.completion_s - r.arrival_s for r in records]
        return SimReport(
            records=records,
            total_jobs=len(records),
            mean_completion_hours=sum(completions) / len(completions) / 3600.0,
            peak_simultaneous_jobs=self.peak_active,
            peak_allocated_gpus=self.peak_used,
            capacity=self.capacity,
            makespan_s=max(r.completion_s for r in records),
            total_gpu_seconds=sum(r.gpu_seconds for r in records),
            total_restarts=sum(r.restarts for r in records),
            events_processed=self.events,
        )


def run_simulation(config: SimConfig, jobs: Sequence[JobSpec]) -> SimReport:
    """Run one deterministic simulation of the workload under the config."""
    return _Simulation(config, jobs).run()
