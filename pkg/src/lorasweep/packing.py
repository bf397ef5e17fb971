"""Single-job packing: choose the adapters that maximize rank-weighted
throughput on a fixed number of GPUs.

The objective is ``sum(rank_k) / job_time`` over the selected configurations
subject to the per-device memory budget.  With the affine time model the
ratio is maximized exactly by Dinkelbach's parametric method: repeatedly
solve the 0/1 knapsack ``max sum(rank_k - lam * steps * marginal * load_k)``
and raise ``lam`` to the achieved ratio until it stops improving.
Heterogeneous step counts are handled by running one parametric search per
distinct ``train_steps`` ceiling, which restores an affine denominator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .costmodel import MemoryContext, TimeModel, job_time
from .workload import LoraConfig

__all__ = [
    "NoFeasiblePacking",
    "PackingSolution",
    "knapsack_max",
    "solve_subproblem",
    "brute_force_subproblem",
    "MAX_BRUTE_FORCE_CONFIGS",
]

logger = logging.getLogger(__name__)

MAX_BRUTE_FORCE_CONFIGS = 20

# The dynamic program is preferred when the rescaled capacity stays small.
_DP_CAPACITY_LIMIT = 100_000
_DP_CELL_LIMIT = 4_000_000


class NoFeasiblePacking(RuntimeError):
    """No non-empty selection satisfies the memory constraint."""


@dataclass(frozen=True)
class PackingSolution:
    """A feasible selection for one job at a fixed parallelism degree."""

    selected: tuple[str, ...]
    degree: int
    throughput: float
    memory_used: int


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def knapsack_max(values: Sequence[float], weights: Sequence[int],
                 capacity: float) -> tuple[float, list[int]]:
    """Exact 0/1 knapsack; returns (best value, chosen indices).

    Items with non-positive value are never taken.  Solved by depth-first
    branch and bound with the fractional-relaxation bound; falls back to
    dynamic programming when the weights share a large enough common divisor
    for the table to stay small.
    """
    base_value = 0.0
    chosen_always: list[int] = []
    items = []
    for i, (v, w) in enumerate(zip(values, weights)):
        if v <= 0:
            continue
        if w <= 0:
            base_value += v
            chosen_always.append(i)
            continue
        if w <= capacity:
            items.append((v, w, i))
    if not items:
        return base_value, chosen_always

    cap_int = int(math.floor(capacity))
    divisor = 0
    for _, w, _ in items:
        divisor = math.gcd(divisor, w)
    if divisor > 0 and cap_int // divisor <= _DP_CAPACITY_LIMIT and \
            len(items) * (cap_int // divisor + 1) <= _DP_CELL_LIMIT:
        value, picked = _knapsack_dp(items, cap_int // divisor, divisor)
    else:
        value, picked = _knapsack_bb(items, capacity)
    return base_value + value, sorted(chosen_always + picked)


def _knapsack_dp(items, capacity: int, divisor: int) -> tuple[float, list[int]]:
    n = len(items)
    table = np.zeros((n + 1, capacity + 1))
    scaled = [w // divisor for _, w, _ in items]
    for row, ((v, _, _), w) in enumerate(zip(items, scaled), start=1):
        table[row] = table[row - 1]
        take = table[row - 1, : capacity + 1 - w] + v
        keep = table[row, w:]
        table[row, w:] = np.maximum(keep, take)
    picked = []
    c = capacity
    for row in range(n, 0, -1):
        if table[row, c] != table[row - 1, c]:
            picked.append(items[row - 1][2])
            c -= scaled[row - 1]
    return float(table[n, capacity]), picked


def _knapsack_bb(items, capacity: float) -> tuple[float, list[int]]:
    # Items with identical (value, weight) collapse into one class with a
    # multiplicity; grid-shaped candidate sets produce few classes, which
    # keeps the search shallow.  Density order makes the fractional bound
    # tight.
    classes: dict[tuple[float, int], list[int]] = {}
    for v, w, i in items:
        classes.setdefault((v, w), []).append(i)
    keyed = sorted(classes.items(), key=lambda kv: (-kv[0][0] / kv[0][1], kv[1]))
    vals = [v for (v, _), _ in keyed]
    wts = [w for (_, w), _ in keyed]
    members = [sorted(ids) for _, ids in keyed]
    counts = [len(ids) for ids in members]
    n = len(keyed)

    best_value = 0.0
    best_take: list[int] = []
    take = [0] * n

    def bound(pos: int, value: float, room: float) -> float:
        b = value
        for j in range(pos, n):
            whole = min(counts[j], int(room // wts[j]))
            b += whole * vals[j]
            room -= whole * wts[j]
            if whole < counts[j]:
                b += vals[j] * (room / wts[j])
                break
        return b

    def dfs(pos: int, value: float, room: float):
        nonlocal best_value, best_take
        if value > best_value:
            best_value = value
            best_take = take[:pos]
        if pos >= n or bound(pos, value, room) <= best_value:
            return
        most = min(counts[pos], int(room // wts[pos]))
        for c in range(most, -1, -1):
            take[pos] = c
            dfs(pos + 1, value + c * vals[pos], room - c * wts[pos])
        take[pos] = 0

    dfs(0, 0.0, capacity)
    chosen = []
    for j, c in enumerate(best_take):
        chosen.extend(members[j][:c])
    return best_value, chosen


def _dinkelbach(part, steps_cap: int, base_s: float, marginal_s: float,
                capacity: float, degree: int) -> list:
    """Parametric search over one steps-partition; returns the chosen items."""
    weights = [w for _, w, _, _ in part]
    lam = 0.0
    best = None
    max_iter = 5 * len(part) + 10
    for iteration in range(1, max_iter + 1):
        values = [rank - lam * steps_cap * marginal_s * load for _, _, load, rank in part]
        _, picked = knapsack_max(values, weights, capacity)
        if not picked:
            break
        chosen = [part[i] for i in picked]
        total_rank = sum(rank for _, _, _, rank in chosen)
        denom = steps_cap * (base_s + marginal_s * sum(load for _, _, load, _ in chosen))
        new_lam = total_rank / denom
        logger.debug("dinkelbach degree=%d steps<=%d iter=%d lambda=%.12g",
                     degree, steps_cap, iteration, new_lam)
        if new_lam <= lam * (1 + 1e-12):
            break
        lam = new_lam
        best = chosen
    else:
        raise RuntimeError("parametric search failed to converge")
    return best or []


def solve_subproblem(degree: int, configs: Sequence[LoraConfig], tm: TimeModel,
                     mem: MemoryContext) -> PackingSolution:
    """Throughput-maximizing selection for one job at ``degree`` GPUs.

    Exact under the affine time model; the returned throughput equals the
    brute-force optimum.  Raises ``NoFeasiblePacking`` when the base model
    alone exceeds the budget or no single configuration fits.
    """
    if not _is_power_of_two(degree):
        raise ValueError(f"parallelism degree must be a power of two (got {degree})")
    if not configs:
        raise ValueError("empty candidate set")
    capacity = mem.capacity(degree)
    if capacity < 0:
        raise NoFeasiblePacking(f"base model does not fit at degree {degree}")
    base_s, marginal_s = tm.params(degree)

    items = []
    for cfg in sorted(configs, key=lambda c: c.id):
        weight = mem.adapter_bytes(cfg.id, degree)
        if weight <= capacity:
            items.append((cfg, weight, tm.load(cfg), float(cfg.rank)))
    if not items:
        raise NoFeasiblePacking(f"no configuration fits at degree {degree}")

    best_key = None
    best_sel: list[LoraConfig] = []
    best_throughput = 0.0
    for steps_cap in sorted({cfg.train_steps for cfg, _, _, _ in items}):
        part = [it for it in items if it[0].train_steps <= steps_cap]
        chosen = _dinkelbach(part, steps_cap, base_s, marginal_s, capacity, degree)
        if not chosen:
            continue
        selection = [cfg for cfg, _, _, _ in chosen]
        throughput = sum(c.rank for c in selection) / job_time(tm, selection, degree)
        key = (-throughput, -sum(c.rank for c in selection),
               tuple(sorted(c.id for c in selection)))
        if best_key is None or key < best_key:
            best_key = key
            best_sel = selection
            best_throughput = throughput

    if best_key is None:
        raise NoFeasiblePacking(f"no configuration fits at degree {degree}")
    ids = tuple(sorted(c.id for c in best_sel))
    return PackingSolution(selected=ids, degree=degree, throughput=best_throughput,
                           memory_used=mem.job_bytes(ids, degree))


def brute_force_subproblem(degree: int, configs: Sequence[LoraConfig], tm: TimeModel,
                           mem: MemoryContext) -> PackingSolution:
    """Exhaustive oracle for :func:`solve_subproblem` (|configs| <= 20).

    Enumerates every non-empty subset; ties broken by larger rank sum, then
    lexicographic id order.
    """
    if not _is_power_of_two(degree):
        raise ValueError(f"parallelism degree must be a power of two (got {degree})")
    n = len(configs)
    if n == 0:
        raise ValueError("empty candidate set")
    if n > MAX_BRUTE_FORCE_CONFIGS:
        raise ValueError(f"brute force limited to {MAX_BRUTE_FORCE_CONFIGS} configs (got {n})")
    capacity = mem.capacity(degree)
    if capacity < 0:
        raise NoFeasiblePacking(f"base model does not fit at degree {degree}")
    base_s, marginal_s = tm.params(degree)

    ordered = sorted(configs, key=lambda c: c.id)
    weights = np.array([mem.adapter_bytes(c.id, degree) for c in ordered], dtype=np.float64)
    loads = np.array([tm.load(c) for c in ordered])
    ranks = np.array([float(c.rank) for c in ordered])
    steps = np.array([c.train_steps for c in ordered], dtype=np.int64)

    best_ratio = -math.inf
    tied_masks: list[int] = []
    for start in range(1, 1 << n, 1 << 16):
        stop = min(start + (1 << 16), 1 << n)
        masks = np.arange(start, stop, dtype=np.int64)
        bits = ((masks[:, None] >> np.arange(n)) & 1).astype(bool)
        feasible = bits @ weights <= capacity
        if not feasible.any():
            continue
        bits = bits[feasible]
        masks = masks[feasible]
        rank_sum = bits @ ranks
        load_sum = bits @ loads
        steps_max = np.where(bits, steps[None, :], 0).max(axis=1)
        ratio = rank_sum / ((base_s + marginal_s * load_sum) * steps_max)
        chunk_best = float(ratio.max())
        if chunk_best > best_ratio:
            best_ratio = chunk_best
            tied_masks = []
        if chunk_best >= best_ratio:
            tied_masks.extend(int(m) for m in masks[ratio == best_ratio])

    if not tied_masks:
        raise NoFeasiblePacking(f"no configuration fits at degree {degree}")

    def tie_key(mask: int):
        ids = tuple(ordered[j].id for j in range(n) if mask >> j & 1)
        return (-sum(ordered[j].rank for j in range(n) if mask >> j & 1), ids)

    best_mask = min(tied_masks, key=tie_key)
    ids = tuple(ordered[j].id for j in range(n) if best_mask >> j & 1)
    return PackingSolution(selected=ids, degree=degree, throughput=best_ratio,
                           memory_used=mem.job_bytes(ids, degree))
