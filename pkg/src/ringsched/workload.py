"""Job profiles, workload generation and trace persistence.

Ships two calibrations derived from bundled ResNet-110 / CIFAR-10
measurements taken on an 8x K40m node (128 images per GPU, Infiniband
interconnect): a step-time profile matching the per-minibatch profiling
numbers, and a runtime profile matching the measured end-to-end training
durations that the rescaling experiments were run against. Synthetic
workloads for the cluster simulation draw per-job profiles from configurable
ranges around those calibrations.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .costmodel import CommParams, JobProfile, select_algorithm, step_time
from .fitting import SpeedSample

__all__ = [
    "DEFAULT_EPOCH_EXAMPLES",
    "RESNET110_MODEL_BYTES",
    "RESNET110_PROFILING",
    "RESNET110_RESCALED_RUNS",
    "RESNET110_RUNS",
    "JobSpec",
    "TraceFormatError",
    "TraceVersionError",
    "WorkloadSpec",
    "calibrate_resnet_profile",
    "calibrate_resnet_runtime_profile",
    "exponential_arrivals",
    "generate_workload",
    "load_trace",
    "profiled_scaling_efficiency",
    "reference_step_time",
    "reference_throughput",
    "rescale_learning_rate",
    "resnet_speed_samples",
    "save_trace",
]

# CIFAR-10 training set size; converts images/sec into epochs/sec.
DEFAULT_EPOCH_EXAMPLES = 50_000

# ResNet-110 (non-bottleneck, widths 16/32/64) has ~1.73M parameters.
RESNET110_MODEL_BYTES = 6_920_000

# Interconnect transfer time, seconds per byte (100 Gbit/s Infiniband).
_LINK_SECONDS_PER_BYTE = 8.0e-11

# Per-step profiling at 128 images per GPU: milliseconds and images/sec.
RESNET110_PROFILING = {
    1: {"t_forward_ms": 108.0, "t_back_ms": 236.5, "step_ms": 402.5, "images_per_s": 318.0},
    2: {"t_forward_ms": 110.2, "t_back_ms": 274.6, "step_ms": 427.2, "images_per_s": 576.2},
    4: {"t_forward_ms": 107.1, "t_back_ms": 290.1, "step_ms": 444.3, "images_per_s": 1152.4},
    8: {"t_forward_ms": 106.0, "t_back_ms": 307.4, "step_ms": 470.2, "images_per_s": 2177.8},
}

# End-to-end training runs at a fixed GPU count: (epochs to converge, minutes).
RESNET110_RUNS = {
    1: (160, 368.0),
    2: (170, 232.0),
    4: (160, 126.0),
    8: (170, 84.0),
}

# Stop/restart runs: trained on 4 GPUs, checkpointed, resumed on 8.
RESNET110_RESCALED_RUNS = (
    {"workers_before": 4, "workers_after": 8, "switch_epochs": 51, "epochs": 171, "minutes": 104.0},
    {"workers_before": 4, "workers_after": 8, "switch_epochs": 102, "epochs": 162, "minutes": 113.0},
)


class TraceFormatError(ValueError):
    """A trace file failed to parse; ``line`` is the 1-based failing line."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TraceVersionError(TraceFormatError):
    """The trace carries a version this reader does not understand."""


def calibrate_resnet_profile(epoch_examples: int = DEFAULT_EPOCH_EXAMPLES) -> JobProfile:
    """Built-in profile reproducing the measured per-step times.

    The measured 1-GPU step (402.5 ms for 128 images) exceeds the sum of the
    profiled forward and backward passes; the difference (optimizer step,
    input pipeline) is folded into the backward coefficient so the modelled
    step matches the end-to-end measurement. The message latency comes from
    the measured step growth between 4 and 8 GPUs under doubling-halving,
    where each doubling adds four latency rounds.
    """
    base = RESNET110_PROFILING[1]
    per_gpu = 128
    step_1 = base["step_ms"] / 1000.0
    t_forward = (base["t_forward_ms"] / 1000.0) / per_gpu
    t_back = (step_1 - base["t_forward_ms"] / 1000.0) / per_gpu
    alpha = (RESNET110_PROFILING[8]["step_ms"] - RESNET110_PROFILING[4]["step_ms"]) / 1000.0 / 4.0
    return JobProfile(
        m=per_gpu,
        n=RESNET110_MODEL_BYTES,
        t_forward=t_forward,
        t_back=t_back,
        steps_per_epoch=epoch_examples / per_gpu,
        comm=CommParams(alpha=alpha, beta=_LINK_SECONDS_PER_BYTE, gamma=0.0),
    )


def calibrate_resnet_runtime_profile(epoch_examples: int = DEFAULT_EPOCH_EXAMPLES) -> JobProfile:
    """Built-in profile whose simulated speeds match the measured run times.

    The per-step profiling and the end-to-end durations disagree by up to
    ~30% at 8 GPUs (wall time includes evaluation and checkpointing), so
    rescaling experiments are replayed against a second calibration: compute
    and latency coefficients are solved exactly from the 4- and 8-GPU run
    durations under the ring cost model.
    """
    per_gpu = 128
    epochs_4, minutes_4 = RESNET110_RUNS[4]
    epochs_8, minutes_8 = RESNET110_RUNS[8]
    per_epoch_4 = minutes_4 * 60.0 / epochs_4
    per_epoch_8 = minutes_8 * 60.0 / epochs_8
    steps = epoch_examples / per_gpu
    transfer = steps * 4.0 * _LINK_SECONDS_PER_BYTE * RESNET110_MODEL_BYTES
    lhs_4 = per_epoch_4 - 0.75 * transfer
    lhs_8 = per_epoch_8 - 0.875 * transfer
    # Solve compute/4 + 3*latency = lhs_4 and compute/8 + 7*latency = lhs_8,
    # where compute is seconds per epoch at one worker and latency is the
    # per-epoch cost of four message rounds.
    latency = (2.0 * lhs_8 - lhs_4) / 11.0
    compute = 4.0 * (lhs_4 - 3.0 * latency)
    if latency <= 0 or compute <= 0:
        raise ValueError("reference run times do not admit a positive calibration")
    t_sum = compute / epoch_examples
    forward_share = RESNET110_PROFILING[1]["t_forward_ms"] / RESNET110_PROFILING[1]["step_ms"]
    return JobProfile(
        m=per_gpu,
        n=RESNET110_MODEL_BYTES,
        t_forward=t_sum * forward_share,
        t_back=t_sum * (1.0 - forward_share),
        steps_per_epoch=steps,
        comm=CommParams(
            alpha=latency / (4.0 * steps),
            beta=_LINK_SECONDS_PER_BYTE,
            gamma=0.0,
        ),
    )


def reference_step_time(profile: JobProfile, workers: int, per_gpu_examples: int = 128) -> float:
    """Step seconds in the profiling setup, which keeps 128 examples per GPU.

    The global minibatch therefore grows with the worker count; the all-reduce
    algorithm is whatever :func:`select_algorithm` picks for the model size.
    """
    scaled = dataclasses.replace(profile, m=per_gpu_examples * workers)
    algo = select_algorithm(workers, profile.n)
    return step_time(scaled, workers, algo)


def reference_throughput(profile: JobProfile, workers: int, per_gpu_examples: int = 128) -> float:
    """Images per second in the per-GPU-constant-batch profiling setup."""
    return per_gpu_examples * workers / reference_step_time(profile, workers, per_gpu_examples)


def profiled_scaling_efficiency(low_workers: int = 4, high_workers: int = 8) -> float:
    """Measured scaling efficiency between two profiled GPU counts."""
    low = RESNET110_PROFILING[low_workers]["images_per_s"]
    high = RESNET110_PROFILING[high_workers]["images_per_s"]
    return high / (low * high_workers / low_workers)


def resnet_speed_samples(epoch_examples: int = DEFAULT_EPOCH_EXAMPLES) -> list[SpeedSample]:
    """The profiled throughputs as epoch-speed samples for model fitting."""
    return [
        SpeedSample(workers=w, speed=row["images_per_s"] / epoch_examples)
        for w, row in sorted(RESNET110_PROFILING.items())
    ]


def rescale_learning_rate(lr_last: float, gpus_last: int, gpus_new: int) -> float:
    """Linear learning-rate scaling applied when a job changes GPU count."""
    if not math.isfinite(lr_last) or lr_last <= 0:
        raise ValueError(f"lr_last must be > 0, got {lr_last!r}")
    if gpus_last < 1 or gpus_new < 1:
        raise ValueError("GPU counts must be >= 1")
    return lr_last * gpus_new / gpus_last


@dataclass(frozen=True, slots=True)
class JobSpec:
    """One job of a workload: identity, arrival, profile and true work."""

    job_id: int
    arrival_s: float
    profile: JobProfile
    true_epochs: float
    max_workers: int = 8

    def __post_init__(self) -> None:
        if self.job_id < 0:
            raise ValueError(f"job_id must be >= 0, got {self.job_id}")
        if not math.isfinite(self.arrival_s) or self.arrival_s < 0:
            raise ValueError(f"arrival_s must be >= 0, got {self.arrival_s!r}")
        if not math.isfinite(self.true_epochs) or self.true_epochs <= 0:
            raise ValueError(f"true_epochs must be > 0, got {self.true_epochs!r}")
        if self.max_workers < 1:
            raise ValueError(f"max_workers must be >= 1, got {self.max_workers}")


@dataclass(frozen=True, slots=True)
class WorkloadSpec:
    """Ranges for randomized workload generation.

    Defaults are centred on the ResNet-110 runtime calibration and give jobs
    in the 5 to 9 hour single-GPU range with 4.5x to 7x speedup at 8 GPUs.
    """

    total_jobs: int
    mean_interarrival_s: float
    rng_seed: int
    t_forward_range: tuple[float, float] = (6.0e-4, 1.0e-3)
    t_back_range: tuple[float, float] = (1.6e-3, 2.8e-3)
    alpha_range: tuple[float, float] = (3.0e-4, 1.0e-3)
    beta_range: tuple[float, float] = (5.0e-11, 1.1e-10)
    gamma_range: tuple[float, float] = (0.0, 1.0e-11)
    m_range: tuple[int, int] = (128, 512)
    n_range: tuple[int, int] = (5_000_000, 30_000_000)
    epochs_range: tuple[float, float] = (160.0, 170.0)
    epoch_examples: int = DEFAULT_EPOCH_EXAMPLES
    max_workers: int = 8
    restart_cost: float = 10.0
    base_lr: float = 0.1

    def __post_init__(self) -> None:
        if self.total_jobs < 1:
            raise ValueError(f"total_jobs must be >= 1, got {self.total_jobs}")
        if self.mean_interarrival_s <= 0:
            raise ValueError(f"mean_interarrival_s must be > 0, got {self.mean_interarrival_s}")
        for name in (
            "t_forward_range",
            "t_back_range",
            "alpha_range",
            "beta_range",
            "gamma_range",
            "m_range",
            "n_range",
            "epochs_range",
        ):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is inverted: {lo!r} > {hi!r}")
        if self.t_forward_range[0] <= 0 or self.t_back_range[0] <= 0:
            raise ValueError("compute time ranges must be positive")
        if self.m_range[0] < 1 or self.n_range[0] < 1 or self.epochs_range[0] <= 0:
            raise ValueError("m, n and epochs ranges must be positive")


def exponential_arrivals(mean_interarrival_s: float, total_jobs: int, rng: np.random.Generator) -> list[float]:
    """Cumulative arrival times of a Poisson process with the given mean gap."""
    if mean_interarrival_s <= 0:
        raise ValueError(f"mean_interarrival_s must be > 0, got {mean_interarrival_s}")
    if total_jobs < 1:
        raise ValueError(f"total_jobs must be >= 1, got {total_jobs}")
    gaps = rng.exponential(mean_interarrival_s, total_jobs)
    return [float(t) for t in np.cumsum(gaps)]


def generate_workload(spec: WorkloadSpec) -> list[JobSpec]:
    """Seeded workload: Poisson arrivals, per-job profiles drawn from ranges.

    The draw order is fixed (arrivals first, then per-job parameters), so a
    given spec always produces the same trace.
    """
    rng = np.random.default_rng(spec.rng_seed)
    arrivals = exponential_arrivals(spec.mean_interarrival_s, spec.total_jobs, rng)
    jobs = []
    for job_id, arrival in enumerate(arrivals):
        t_forward = float(rng.uniform(*spec.t_forward_range))
        t_back = float(rng.uniform(*spec.t_back_range))
        alpha = float(rng.uniform(*spec.alpha_range))
        beta = float(rng.uniform(*spec.beta_range))
        gamma = float(rng.uniform(*spec.gamma_range))
        m = int(rng.integers(spec.m_range[0], spec.m_range[1] + 1))
        n = int(rng.integers(spec.n_range[0], spec.n_range[1] + 1))
        epochs = float(rng.uniform(*spec.epochs_range))
        profile = JobProfile(
            m=m,
            n=n,
            t_forward=t_forward,
            t_back=t_back,
            steps_per_epoch=spec.epoch_examples / m,
            comm=CommParams(alpha=alpha, beta=beta, gamma=gamma),
            restart_cost=spec.restart_cost,
            base_lr=spec.base_lr,
        )
        jobs.append(
            JobSpec(
                job_id=job_id,
                arrival_s=arrival,
                profile=profile,
                true_epochs=epochs,
                max_workers=spec.max_workers,
            )
        )
    return jobs


_TRACE_FORMAT = "ringsched-trace"
TRACE_VERSION = 1


def _job_to_dict(job: JobSpec) -> dict:
    profile = job.profile
    return {
        "job_id": job.job_id,
        "arrival_s": job.arrival_s,
        "true_epochs": job.true_epochs,
        "max_workers": job.max_workers,
        "profile": {
            "m": profile.m,
            "n": profile.n,
            "t_forward": profile.t_forward,
            "t_back": profile.t_back,
            "steps_per_epoch": profile.steps_per_epoch,
            "alpha": profile.comm.alpha,
            "beta": profile.comm.beta,
            "gamma": profile.comm.gamma,
            "restart_cost": profile.restart_cost,
            "base_lr": profile.base_lr,
        },
    }


def _job_from_dict(record: dict, line: int) -> JobSpec:
    try:
        p = record["profile"]
        profile = JobProfile(
            m=p["m"],
            n=p["n"],
            t_forward=p["t_forward"],
            t_back=p["t_back"],
            steps_per_epoch=p["steps_per_epoch"],
            comm=CommParams(alpha=p["alpha"], beta=p["beta"], gamma=p["gamma"]),
            restart_cost=p["restart_cost"],
            base_lr=p["base_lr"],
        )
        return JobSpec(
            job_id=record["job_id"],
            arrival_s=record["arrival_s"],
            profile=profile,
            true_epochs=record["true_epochs"],
            max_workers=record["max_workers"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceFormatError(f"invalid job record: {exc}", line) from exc


def save_trace(path, jobs: Sequence[JobSpec], *, seed: int | None = None, metadata: dict | None = None) -> None:
    """Write a workload as a line-delimited trace: one header, one job per line."""
    header = {
        "format": _TRACE_FORMAT,
        "version": TRACE_VERSION,
        "jobs": len(jobs),
    }
    if seed is not None:
        header["seed"] = seed
    if metadata:
        header["metadata"] = metadata
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(json.dumps(_job_to_dict(job), sort_keys=True) for job in jobs)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_trace(path) -> list[JobSpec]:
    """Read a trace written by :func:`save_trace`.

    Raises :class:`TraceFormatError` with the failing line number on parse
    problems and :class:`TraceVersionError` on unknown versions.
    """
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise TraceFormatError("empty trace file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"invalid header: {exc}", 1) from exc
    if not isinstance(header, dict) or header.get("format") != _TRACE_FORMAT:
        raise TraceFormatError("not a ringsched trace (bad format marker)", 1)
    if header.get("version") != TRACE_VERSION:
        raise TraceVersionError(
            f"unsupported trace version {header.get('version')!r} (expected {TRACE_VERSION})", 1
        )
    expected = header.get("jobs")
    jobs = []
    last_arrival = -math.inf
    for offset, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"invalid job record: {exc}", offset) from exc
        job = _job_from_dict(record, offset)
        if job.arrival_s < last_arrival:
            raise TraceFormatError("arrival times must be nondecreasing", offset)
        last_arrival = job.arrival_s
        jobs.append(job)
    if isinstance(expected, int) and expected != len(jobs):
        raise TraceFormatError(
            f"header promises {expected} jobs but the file holds {len(jobs)}", len(lines)
        )
    return jobs
