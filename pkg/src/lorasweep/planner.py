"""Job planning: recursively split the GPU pool into power-of-two
allocations, pack configurations into jobs, and order the jobs into a queue
that approximately minimizes makespan.

The recursion enumerates, for the currently free ``g`` GPUs, every degree
``d`` in ``{2^floor(log2 g), ..., 2, 1}``, asks the packing layer for the
best job at that degree, and recurses on ``(g - d, remaining configs)``.
Every complete policy is a set of jobs meant to run concurrently; the one
with the smallest batch completion time wins, ties broken by higher
aggregate throughput and then by a content signature.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

from .costmodel import CalibrationError, MemoryContext, TimeModel, job_time
from .packing import NoFeasiblePacking, solve_subproblem
from .workload import LoraConfig, WorkloadSyntaxError, WorkloadValidationError

__all__ = [
    "UnschedulableError",
    "Job",
    "SchedulingPolicy",
    "PlannedBatch",
    "JobQueue",
    "PlannerStats",
    "TailBound",
    "make_job",
    "dtm",
    "plan_jobs",
    "ar_bound",
    "min_gpu_queue",
    "max_gpu_queue",
    "serialize_queue",
    "parse_queue",
]

logger = logging.getLogger(__name__)


class UnschedulableError(RuntimeError):
    """A configuration cannot be scheduled on the given pool."""


@dataclass(frozen=True)
class Job:
    """A set of packed configurations plus a parallelism degree."""

    id: str
    configs: tuple[str, ...]
    degree: int
    predicted_time: float
    predicted_memory: int


@dataclass(frozen=True)
class SchedulingPolicy:
    """Jobs intended to run concurrently on the free GPUs."""

    jobs: tuple[Job, ...]

    @property
    def gpus_used(self) -> int:
        return sum(j.degree for j in self.jobs)

    @property
    def completion_time(self) -> float:
        return max(j.predicted_time for j in self.jobs)

    def config_ids(self) -> tuple[str, ...]:
        return tuple(cid for j in self.jobs for cid in j.configs)


@dataclass(frozen=True)
class PlannedBatch:
    """A policy plus the planner's predicted launch time."""

    time: float
    policy: SchedulingPolicy


@dataclass(frozen=True)
class JobQueue:
    """Ordered batches covering the whole configuration set exactly once."""

    batches: tuple[PlannedBatch, ...]
    workload_digest: str = ""

    def jobs(self) -> tuple[Job, ...]:
        return tuple(j for b in self.batches for j in b.policy.jobs)

    def config_ids(self) -> tuple[str, ...]:
        return tuple(cid for j in self.jobs() for cid in j.configs)


@dataclass
class PlannerStats:
    subproblem_calls: int = 0


def make_job(config_ids: Iterable[str], degree: int, tm: TimeModel,
             mem: MemoryContext) -> Job:
    ids = tuple(sorted(config_ids))
    if not ids:
        raise ValueError("a job needs at least one configuration")
    cfgs = [mem.config(cid) for cid in ids]
    digest = hashlib.sha256(f"{degree}:{','.join(ids)}".encode("utf-8")).hexdigest()[:10]
    return Job(
        id=f"job-{digest}",
        configs=ids,
        degree=degree,
        predicted_time=job_time(tm, cfgs, degree),
        predicted_memory=mem.job_bytes(ids, degree),
    )


def _descending_degrees(g: int) -> list[int]:
    top = 1 << (g.bit_length() - 1)
    out = []
    while top >= 1:
        out.append(top)
        top //= 2
    return out


def _policy_key(jobs: Sequence[Job], mem: MemoryContext):
    completion = max(j.predicted_time for j in jobs)
    throughput = sum(
        sum(mem.config(cid).rank for cid in j.configs) / j.predicted_time for j in jobs)
    signature = tuple(sorted((j.degree, j.configs) for j in jobs))
    return (completion, -throughput, signature)


def dtm(gpus: int, configs: Sequence[LoraConfig], tm: TimeModel, mem: MemoryContext,
        *, memoize: bool = False, stats: PlannerStats | None = None,
        collect: list[SchedulingPolicy] | None = None) -> SchedulingPolicy:
    """Best concurrent policy for ``gpus`` free GPUs and the given configs.

    Explores degree choices recursively and returns the enumerated policy
    with the smallest predicted batch completion time.  A degree branch that
    cannot form a job is pruned; if no degree works at a node, the partial
    policy built so far becomes a terminal candidate.

    ``stats`` counts packing-solver invocations.  ``collect`` retains every
    complete candidate policy (test hook).  ``memoize`` caches best suffixes
    by (free GPUs, remaining configuration set); it changes the number of
    solver calls but not the outcome on tie-free instances, and is off by
    default.
    """
    if gpus < 1:
        raise ValueError(f"gpus must be >= 1 (got {gpus})")
    if not configs:
        raise ValueError("no configurations to plan")

    def solve(degree: int, remaining: Sequence[LoraConfig]):
        if stats is not None:
            stats.subproblem_calls += 1
        try:
            return solve_subproblem(degree, remaining, tm, mem)
        except NoFeasiblePacking:
            return None

    best: tuple | None = None
    best_jobs: tuple[Job, ...] | None = None

    if memoize:
        cache: dict[tuple[int, frozenset[str]], tuple[Job, ...] | None] = {}

        def suffix(g: int, remaining: tuple[LoraConfig, ...]) -> tuple[Job, ...]:
            if g <= 0 or not remaining:
                return ()
            key = (g, frozenset(c.id for c in remaining))
            if key in cache:
                return cache[key]
            candidates: list[tuple[Job, ...]] = []
            for degree in _descending_degrees(g):
                solution = solve(degree, remaining)
                if solution is None:
                    continue
                job = make_job(solution.selected, degree, tm, mem)
                used = set(solution.selected)
                rest = tuple(c for c in remaining if c.id not in used)
                candidates.append((job,) + suffix(g - degree, rest))
            result = () if not candidates else min(
                candidates, key=lambda jobs: _policy_key(jobs, mem))
            cache[key] = result
            return result

        jobs = suffix(gpus, tuple(configs))
        if not jobs:
            raise NoFeasiblePacking("no configuration fits on any degree")
        policy = SchedulingPolicy(jobs=jobs)
        if collect is not None:
            collect.append(policy)
        return policy

    def record(jobs: tuple[Job, ...]):
        nonlocal best, best_jobs
        if collect is not None:
            collect.append(SchedulingPolicy(jobs=jobs))
        key = _policy_key(jobs, mem)
        if best is None or key < best:
            best = key
            best_jobs = jobs

    def helper(g: int, acc: tuple[Job, ...], remaining: tuple[LoraConfig, ...]):
        if g <= 0 or not remaining:
            record(acc)
            return
        made_any = False
        for degree in _descending_degrees(g):
            solution = solve(degree, remaining)
            if solution is None:
                continue
            made_any = True
            job = make_job(solution.selected, degree, tm, mem)
            used = set(solution.selected)
            rest = tuple(c for c in remaining if c.id not in used)
            helper(g - degree, acc + (job,), rest)
        if not made_any and acc:
            record(acc)

    helper(gpus, (), tuple(configs))
    if best_jobs is None:
        raise NoFeasiblePacking("no configuration fits on any degree")
    return SchedulingPolicy(jobs=best_jobs)


def plan_jobs(gpu_count: int, configs: Sequence[LoraConfig], tm: TimeModel,
              mem: MemoryContext, *, workload_digest: str = "",
              stats: PlannerStats | None = None) -> JobQueue:
    """Plan the whole sweep: call :func:`dtm` whenever GPUs are free, then
    advance the predicted clock to the next job completion and reclaim its
    GPUs.  The returned queue covers every configuration exactly once.
    """
    if gpu_count < 1:
        raise ValueError(f"gpu_count must be >= 1 (got {gpu_count})")
    remaining = list(configs)
    if not remaining:
        raise ValueError("no configurations to plan")
    for degree in _descending_degrees(gpu_count):
        if not tm.has_degree(degree):
            raise CalibrationError(f"no calibration for degree {degree}")
    for cfg in remaining:
        if mem.min_feasible_degree(cfg.id, gpu_count) is None:
            raise UnschedulableError(
                f"configuration '{cfg.id}' does not fit at any degree <= {gpu_count}")

    batches: list[PlannedBatch] = []
    free = gpu_count
    now = 0.0
    running: list[tuple[float, int, int]] = []  # (end time, seq, degree)
    seq = itertools.count()

    while remaining:
        if free > 0:
            try:
                policy = dtm(free, remaining, tm, mem, stats=stats)
            except NoFeasiblePacking:
                policy = None
            if policy is not None:
                batches.append(PlannedBatch(time=now, policy=policy))
                used = set(policy.config_ids())
                remaining = [c for c in remaining if c.id not in used]
                for job in policy.jobs:
                    heapq.heappush(running, (now + job.predicted_time, next(seq), job.degree))
                free -= policy.gpus_used
                logger.debug("batch %d at t=%.3f: %d jobs on %d GPUs, %d configs left",
                             len(batches) - 1, now, len(policy.jobs),
                             policy.gpus_used, len(remaining))
        if not remaining:
            break
        if not running:
            raise UnschedulableError("planning stalled with no running jobs")
        end = running[0][0]
        while running and running[0][0] == end:
            _, _, degree = heapq.heappop(running)
            free += degree
        now = end

    return JobQueue(batches=tuple(batches), workload_digest=workload_digest)


# --- tail-effect bound -------------------------------------------------------


@dataclass(frozen=True)
class TailBound:
    """Approximation-ratio bound of a schedule, with the evidence that the
    bound's preconditions (full utilization before the tail job starts,
    non-increasing degrees in start order) actually held in the trace."""

    bound: float
    full_pre_tail_utilization: bool
    monotone_degrees: bool
    last_job_id: str
    tail_seconds: float
    tail_degree: int


def ar_bound(trace) -> TailBound:
    """Tail-effect bound ``F / (F - T_last * (G - D) / G)`` for a trace.

    ``F`` is the makespan, ``T_last`` and ``D`` the duration and degree of
    the last-finishing job, ``G`` the pool size.  The bound is 1 exactly
    when ``D == G`` or ``T_last == 0``.  Among jobs tied at the makespan the
    widest one is used; that keeps the bound valid and tightest.
    """
    jobs = list(trace.jobs)
    if not jobs:
        raise ValueError("empty trace")
    gpu_count = trace.gpu_count
    last = max(jobs, key=lambda j: (j.start_s + j.duration_s, j.degree, j.job_id))
    makespan = trace.makespan
    tail = last.duration_s
    degree = last.degree
    denominator = makespan - tail * (gpu_count - degree) / gpu_count
    assert denominator > 0 or makespan == 0, "tail longer than the makespan"
    bound = 1.0 if makespan == 0 else makespan / denominator

    tail_start = last.start_s
    points = sorted({j.start_s for j in jobs} | {j.start_s + j.duration_s for j in jobs} | {0.0})
    full = True
    for a, b in zip(points, points[1:]):
        if a >= tail_start:
            break
        busy = sum(j.degree for j in jobs if j.start_s <= a < j.start_s + j.duration_s)
        if busy != gpu_count:
            full = False
            break

    ordered = sorted(jobs, key=lambda j: (j.start_s, -j.degree))
    monotone = all(a.degree >= b.degree for a, b in zip(ordered, ordered[1:]))

    return TailBound(bound=bound, full_pre_tail_utilization=full,
                     monotone_degrees=monotone, last_job_id=last.job_id,
                     tail_seconds=tail, tail_degree=degree)


# --- baseline strategies ------------------------------------------------------


def _predict_timeline(jobs: Sequence[Job], gpu_count: int) -> list[float]:
    """Greedy FIFO start times for one-job batches (planning estimate)."""
    starts = []
    free = gpu_count
    now = 0.0
    running: list[tuple[float, int, int]] = []
    seq = itertools.count()
    for job in jobs:
        while job.degree > free:
            end, _, degree = heapq.heappop(running)
            freed = degree
            while running and running[0][0] == end:
                _, _, d = heapq.heappop(running)
                freed += d
            free += freed
            now = max(now, end)
        starts.append(now)
        heapq.heappush(running, (now + job.predicted_time, next(seq), job.degree))
        free -= job.degree
    return starts


def min_gpu_queue(configs: Sequence[LoraConfig], gpu_count: int, tm: TimeModel,
                  mem: MemoryContext, *, workload_digest: str = "") -> JobQueue:
    """One config per job at its smallest memory-feasible power-of-two
    degree; jobs run greedily in parallel until the pool is full."""
    jobs = []
    for cfg in configs:
        degree = mem.min_feasible_degree(cfg.id, gpu_count)
        if degree is None:
            raise UnschedulableError(
                f"configuration '{cfg.id}' does not fit at any degree <= {gpu_count}")
        jobs.append(make_job([cfg.id], degree, tm, mem))
    starts = _predict_timeline(jobs, gpu_count)
    batches = tuple(PlannedBatch(time=s, policy=SchedulingPolicy(jobs=(j,)))
                    for s, j in zip(starts, jobs))
    return JobQueue(batches=batches, workload_digest=workload_digest)


def max_gpu_queue(configs: Sequence[LoraConfig], gpu_count: int, tm: TimeModel,
                  mem: MemoryContext, *, workload_digest: str = "") -> JobQueue:
    """One config per job at the largest power-of-two degree the pool
    allows; jobs serialize because each occupies the whole allocation."""
    degree = 1 << (gpu_count.bit_length() - 1)
    jobs = []
    for cfg in configs:
        if not mem.fits([cfg.id], degree):
            raise UnschedulableError(
                f"configuration '{cfg.id}' does not fit at degree {degree}")
        jobs.append(make_job([cfg.id], degree, tm, mem))
    starts = _predict_timeline(jobs, gpu_count)
    batches = tuple(PlannedBatch(time=s, policy=SchedulingPolicy(jobs=(j,)))
                    for s, j in zip(starts, jobs))
    return JobQueue(batches=batches, workload_digest=workload_digest)


# --- queue document -----------------------------------------------------------


def serialize_queue(queue: JobQueue) -> str:
    """Stable machine-readable queue document (field order is fixed)."""
    doc = {
        "workload_digest": queue.workload_digest,
        "batches": [
            {
                "start_time_s": batch.time,
                "jobs": [
                    {
                        "id": job.id,
                        "degree": job.degree,
                        "configs": list(job.configs),
                        "predicted_time_s": job.predicted_time,
                        "predicted_memory_bytes": job.predicted_memory,
                    }
                    for job in batch.policy.jobs
                ],
            }
            for batch in queue.batches
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def parse_queue(text: str) -> JobQueue:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WorkloadSyntaxError(
            f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict) or "batches" not in data:
        raise WorkloadValidationError("queue document must contain 'batches'")
    batches = []
    for i, raw in enumerate(data["batches"]):
        jobs = []
        for j, raw_job in enumerate(raw.get("jobs", [])):
            try:
                jobs.append(Job(
                    id=raw_job["id"],
                    configs=tuple(raw_job["configs"]),
                    degree=int(raw_job["degree"]),
                    predicted_time=float(raw_job["predicted_time_s"]),
                    predicted_memory=int(raw_job["predicted_memory_bytes"]),
                ))
            except (KeyError, TypeError, ValueError):
                raise WorkloadValidationError(
                    f"batches[{i}].jobs[{j}]: malformed job entry") from None
        if not jobs:
            raise WorkloadValidationError(f"batches[{i}]: empty batch")
        batches.append(PlannedBatch(time=float(raw.get("start_time_s", 0.0)),
                                    policy=SchedulingPolicy(jobs=tuple(jobs))))
    return JobQueue(batches=tuple(batches),
                    workload_digest=str(data.get("workload_digest", "")))
