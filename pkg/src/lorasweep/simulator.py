"""Discrete-event execution of a job queue on a simulated GPU pool.

The simulator is the ground truth the planner's predictions are judged
against: batches start in queue order as soon as enough devices are free,
jobs take the lowest-indexed free devices, and the event clock advances to
the next completion.  ``check_feasibility`` re-derives the scheduling
constraints (exactly-once coverage, non-overlap on shared devices, device
counts, memory budget) directly from a trace, and ``brute_force_makespan``
provides the exact optimum for desk-scale instances.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .costmodel import MemoryContext, TimeModel, job_time
from .planner import Job, JobQueue, UnschedulableError, ar_bound
from .workload import GpuPool, LoraConfig

__all__ = [
    "SimulationError",
    "TraceJob",
    "ScheduleTrace",
    "simulate",
    "check_feasibility",
    "brute_force_makespan",
    "BruteForceJob",
    "trace_table",
    "trace_summary",
    "MAX_BRUTE_FORCE_CONFIGS",
    "MAX_BRUTE_FORCE_GPUS",
]

MAX_BRUTE_FORCE_CONFIGS = 6
MAX_BRUTE_FORCE_GPUS = 4


class SimulationError(RuntimeError):
    """The queue cannot be executed as given."""


@dataclass(frozen=True)
class TraceJob:
    job_id: str
    configs: tuple[str, ...]
    degree: int
    start_s: float
    duration_s: float
    devices: tuple[int, ...]
    predicted_s: float

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s

    @property
    def drift_s(self) -> float:
        """Simulated duration minus the planner's prediction."""
        return self.duration_s - self.predicted_s


@dataclass(frozen=True)
class ScheduleTrace:
    jobs: tuple[TraceJob, ...]
    makespan: float
    gpu_count: int
    events: tuple[tuple[float, str, str], ...]  # (time, kind, job id)

    def device_sharing(self) -> dict[tuple[str, str], bool]:
        """Whether each job pair shares at least one device."""
        out = {}
        for a, b in itertools.combinations(self.jobs, 2):
            out[(a.job_id, b.job_id)] = bool(set(a.devices) & set(b.devices))
        return out

    def ordering(self) -> dict[tuple[str, str], bool]:
        """Whether the first job of each pair ends before the second starts."""
        out = {}
        for a, b in itertools.permutations(self.jobs, 2):
            out[(a.job_id, b.job_id)] = a.end_s <= b.start_s
        return out


def simulate(queue: JobQueue, pool: GpuPool, tm: TimeModel,
             configs: Mapping[str, LoraConfig] | Iterable[LoraConfig]) -> ScheduleTrace:
    """Execute the queue: batches start FIFO once they fit, devices are
    assigned lowest-index first, durations come from this simulator's own
    time model (prediction drift is reported per job)."""
    if not isinstance(configs, Mapping):
        configs = {c.id: c for c in configs}

    jobs = queue.jobs()
    for job in jobs:
        for cid in job.configs:
            if cid not in configs:
                raise SimulationError(f"queue references unknown configuration '{cid}'")

    batches = [list(b.policy.jobs) for b in queue.batches]
    for i, batch in enumerate(batches):
        need = sum(j.degree for j in batch)
        if need > pool.gpu_count:
            raise SimulationError(
                f"batch {i} needs {need} GPUs but the pool has {pool.gpu_count}")

    free = list(range(pool.gpu_count))
    heapq.heapify(free)
    running: list[tuple[float, int, Job, tuple[int, ...]]] = []
    seq = itertools.count()
    events: list[tuple[float, str, str]] = []
    trace_jobs: list[TraceJob] = []
    now = 0.0
    next_batch = 0

    def start_ready_batches():
        nonlocal next_batch
        while next_batch < len(batches):
            batch = batches[next_batch]
            if sum(j.degree for j in batch) > len(free):
                return
            for job in batch:
                devices = tuple(heapq.heappop(free) for _ in range(job.degree))
                duration = job_time(tm, [configs[c] for c in job.configs], job.degree)
                heapq.heappush(running, (now + duration, next(seq), job, devices))
                events.append((now, "start", job.id))
                trace_jobs.append(TraceJob(
                    job_id=job.id, configs=job.configs, degree=job.degree,
                    start_s=now, duration_s=duration, devices=devices,
                    predicted_s=job.predicted_time))
            next_batch += 1

    start_ready_batches()
    makespan = 0.0
    while running:
        end = running[0][0]
        while running and running[0][0] == end:
            _, _, job, devices = heapq.heappop(running)
            for d in devices:
                heapq.heappush(free, d)
            events.append((end, "finish", job.id))
        now = end
        makespan = max(makespan, end)
        start_ready_batches()
    if next_batch < len(batches):
        raise SimulationError(f"batch {next_batch} never fits")  # unreachable after upfront check

    return ScheduleTrace(jobs=tuple(trace_jobs), makespan=makespan,
                         gpu_count=pool.gpu_count, events=tuple(events))


def check_feasibility(trace: ScheduleTrace, queue: JobQueue, pool: GpuPool) -> list[str]:
    """Re-derive every scheduling constraint from the trace; the returned
    list is empty iff the trace is a valid execution of the queue."""
    violations = []
    queue_jobs = {j.id: j for j in queue.jobs()}

    expected = {}
    for job in queue.jobs():
        for cid in job.configs:
            expected[cid] = expected.get(cid, 0) + 1
    scheduled: dict[str, int] = {}
    for job in trace.jobs:
        for cid in job.configs:
            scheduled[cid] = scheduled.get(cid, 0) + 1
    for cid, count in expected.items():
        if count != 1:
            violations.append(f"configuration '{cid}' planned {count} times")
        got = scheduled.get(cid, 0)
        if got != 1:
            violations.append(f"configuration '{cid}' scheduled {got} times (expected once)")
    for cid in scheduled:
        if cid not in expected:
            violations.append(f"configuration '{cid}' scheduled but never planned")

    for job in trace.jobs:
        if len(set(job.devices)) != len(job.devices):
            violations.append(f"job '{job.job_id}' repeats a device")
        if len(job.devices) != job.degree:
            violations.append(
                f"job '{job.job_id}' uses {len(job.devices)} devices but degree is {job.degree}")
        for device in job.devices:
            if not 0 <= device < pool.gpu_count:
                violations.append(
                    f"job '{job.job_id}' device {device} outside pool of {pool.gpu_count}")
        if job.start_s < 0:
            violations.append(f"job '{job.job_id}' starts before time zero")
        planned = queue_jobs.get(job.job_id)
        if planned is None:
            violations.append(f"job '{job.job_id}' not present in the queue")
        elif planned.predicted_memory > pool.memory_budget:
            violations.append(
                f"job '{job.job_id}' needs {planned.predicted_memory} bytes per device, "
                f"budget is {pool.memory_budget:.0f}")

    for a, b in itertools.combinations(trace.jobs, 2):
        if not set(a.devices) & set(b.devices):
            continue
        if a.start_s < b.end_s and b.start_s < a.end_s:
            shared = sorted(set(a.devices) & set(b.devices))
            violations.append(
                f"jobs '{a.job_id}' and '{b.job_id}' overlap on device(s) {shared}")

    span = max((j.end_s for j in trace.jobs), default=0.0)
    if not math.isclose(trace.makespan, span, rel_tol=1e-12, abs_tol=1e-9):
        violations.append(
            f"makespan {trace.makespan} inconsistent with last completion {span}")

    return violations


# --- exact small-instance oracle ----------------------------------------------


@dataclass(frozen=True)
class BruteForceJob:
    """One job of the witness schedule returned by the oracle."""

    configs: tuple[str, ...]
    degree: int
    start_s: float
    duration_s: float


def _set_partitions(items: list):
    """All partitions of ``items`` into non-empty blocks."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for partial in _set_partitions(rest):
        for i in range(len(partial)):
            yield partial[:i] + [[first] + partial[i]] + partial[i + 1:]
        yield [[first]] + partial


def _earliest_start(placed: list[tuple[float, float, int]], degree: int,
                    duration: float, gpu_count: int) -> float:
    """Earliest time a rigid job fits given already-placed jobs."""
    candidates = sorted({0.0} | {end for _, end, _ in placed})
    points = sorted({t for s, e, _ in placed for t in (s, e)})
    for t0 in candidates:
        window_points = [t0] + [p for p in points if t0 < p < t0 + duration]
        ok = True
        for p in window_points:
            used = sum(d for s, e, d in placed if s <= p < e)
            if used + degree > gpu_count:
                ok = False
                break
        if ok:
            return t0
    raise AssertionError("unreachable: a job always fits after the last completion")


def _min_makespan(jobs: list[tuple[int, float]], gpu_count: int,
                  best_known: float) -> tuple[float, list[tuple[float, int]]] | None:
    """Exact minimum makespan of rigid jobs on ``gpu_count`` devices.

    Depth-first search over placement orders with greedy earliest-start
    insertion; an optimal schedule always appears among these orders.
    Returns (makespan, [(start, job index)]) or None when ``best_known``
    cannot be beaten.
    """
    n = len(jobs)
    total_area = sum(d * t for d, t in jobs)
    best = best_known
    best_starts: list[tuple[float, int]] | None = None
    placed: list[tuple[float, float, int]] = []
    starts: list[tuple[float, int]] = []

    def dfs(remaining: list[int], makespan: float):
        nonlocal best, best_starts
        if not remaining:
            if makespan < best - 1e-12:
                best = makespan
                best_starts = list(starts)
            return
        lower = max(makespan, total_area / gpu_count,
                    max(jobs[j][1] for j in remaining))
        if lower >= best - 1e-12:
            return
        tried = set()
        for pos, j in enumerate(remaining):
            degree, duration = jobs[j]
            key = (degree, round(duration, 12))
            if key in tried:
                continue
            tried.add(key)
            start = _earliest_start(placed, degree, duration, gpu_count)
            new_makespan = max(makespan, start + duration)
            if new_makespan >= best - 1e-12:
                continue
            placed.append((start, start + duration, degree))
            starts.append((start, j))
            dfs(remaining[:pos] + remaining[pos + 1:], new_makespan)
            placed.pop()
            starts.pop()

    dfs(list(range(n)), 0.0)
    if best_starts is None:
        return None
    return best, best_starts


def brute_force_makespan(configs: Sequence[LoraConfig], gpu_count: int,
                         tm: TimeModel, mem: MemoryContext
                         ) -> tuple[float, list[BruteForceJob]]:
    """Exact optimal makespan over every packing, degree assignment and
    schedule; limited to desk-scale instances (<= 6 configs, <= 4 GPUs).

    Returns the optimum and one witness schedule achieving it.
    """
    if len(configs) > MAX_BRUTE_FORCE_CONFIGS:
        raise ValueError(
            f"brute force limited to {MAX_BRUTE_FORCE_CONFIGS} configs (got {len(configs)})")
    if gpu_count > MAX_BRUTE_FORCE_GPUS:
        raise ValueError(
            f"brute force limited to {MAX_BRUTE_FORCE_GPUS} GPUs (got {gpu_count})")
    if not configs:
        raise ValueError("no configurations")

    degrees = []
    d = 1
    while d <= gpu_count:
        degrees.append(d)
        d *= 2

    option_cache: dict[tuple[str, ...], list[tuple[int, float]]] = {}

    def block_options(block: tuple[LoraConfig, ...]) -> list[tuple[int, float]]:
        ids = tuple(sorted(c.id for c in block))
        if ids not in option_cache:
            options = []
            for degree in degrees:
                if mem.fits(ids, degree):
                    options.append((degree, job_time(tm, list(block), degree)))
            option_cache[ids] = options
        return option_cache[ids]

    best = math.inf
    witness: list[BruteForceJob] | None = None
    for partition in _set_partitions(list(configs)):
        blocks = [tuple(b) for b in partition]
        per_block = [block_options(b) for b in blocks]
        if any(not options for options in per_block):
            continue
        for combo in itertools.product(*per_block):
            jobs = list(combo)
            lower = max(max(t for _, t in jobs), sum(d * t for d, t in jobs) / gpu_count)
            if lower >= best - 1e-12:
                continue
            result = _min_makespan(jobs, gpu_count, best)
            if result is None:
                continue
            makespan, starts = result
            if makespan < best - 1e-12:
                best = makespan
                witness = [
                    BruteForceJob(
                        configs=tuple(sorted(c.id for c in blocks[j])),
                        degree=jobs[j][0],
                        start_s=start,
                        duration_s=jobs[j][1],
                    )
                    for start, j in sorted(starts)
                ]

    if witness is None:
        raise UnschedulableError("no feasible schedule exists for the instance")
    return best, witness


# --- trace export ---------------------------------------------------------------


def trace_table(trace: ScheduleTrace) -> list[dict]:
    """Tabular rows suitable for Gantt rendering."""
    rows = []
    for job in sorted(trace.jobs, key=lambda j: (j.start_s, j.job_id)):
        rows.append({
            "job_id": job.job_id,
            "start_s": job.start_s,
            "end_s": job.end_s,
            "devices": list(job.devices),
            "configs": list(job.configs),
            "drift_s": job.drift_s,
        })
    return rows


def trace_summary(trace: ScheduleTrace, pool: GpuPool) -> dict:
    """Makespan, utilization, tail bound and its precondition flags."""
    work = sum(j.degree * j.duration_s for j in trace.jobs)
    utilization = 0.0 if trace.makespan == 0 else work / (pool.gpu_count * trace.makespan)
    tail = ar_bound(trace)
    return {
        "makespan_s": trace.makespan,
        "utilization": utilization,
        "ar_bound": tail.bound,
        "full_pre_tail_utilization": tail.full_pre_tail_utilization,
        "monotone_degrees": tail.monotone_degrees,
    }
