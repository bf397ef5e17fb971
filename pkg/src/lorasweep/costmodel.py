"""Memory, FLOP, and iteration-time cost models for packed LoRA jobs.

Memory quantities are exact integer byte counts per device.  The adapter
state decomposes into parameters, gradients (1x parameters), AdamW optimizer
state (2x parameters) and activations; tensor/pipeline parallelism divides
all four, ZeRO levels divide the state components they shard.  The time
model is affine in the packed adapter load: one packed iteration takes
``t_base(d) + t_marginal(d) * sum_k load_k`` seconds at parallelism degree
``d``, with ``load = rank * batch_size * seq_len * load_scale``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .workload import (
    GpuPool,
    LoraConfig,
    ModelSpec,
    ProfileRecord,
    ShardingSpec,
    WorkloadSyntaxError,
    WorkloadValidationError,
    validate_sharding,
)

__all__ = [
    "CalibrationError",
    "MemoryBreakdown",
    "ProfileRecord",
    "TimeModel",
    "MemoryContext",
    "GRAD_COPIES",
    "OPT_COPIES",
    "lora_param_memory",
    "lora_state_memory",
    "base_memory",
    "job_memory",
    "lora_flop",
    "adapter_load",
    "calibrate_time_model",
    "job_time",
    "read_profiles",
    "write_profiles",
]

logger = logging.getLogger(__name__)

# AdamW keeps one gradient buffer plus two moment buffers per parameter.
GRAD_COPIES = 1
OPT_COPIES = 2


class CalibrationError(ValueError):
    """The time model cannot be fitted (or is missing) for a needed degree."""


def _ceil_div(num: int, den: int) -> int:
    return -(-num // den)


def _check_sharding(shard: ShardingSpec) -> None:
    violations = validate_sharding(shard)
    if violations:
        raise WorkloadValidationError("sharding: " + "; ".join(violations))


@dataclass(frozen=True)
class MemoryBreakdown:
    """Per-device adapter state, in bytes."""

    param_bytes: int
    grad_bytes: int
    opt_bytes: int
    act_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.param_bytes + self.grad_bytes + self.opt_bytes + self.act_bytes


def _raw_param_bytes(cfg: LoraConfig, model: ModelSpec) -> int:
    per_layer = sum(t.h_in + t.h_out for t in model.target_modules) * cfg.rank
    return model.n_layers * per_layer * model.c_prec


def lora_param_memory(cfg: LoraConfig, model: ModelSpec, shard: ShardingSpec) -> int:
    """Bytes per device for one adapter's weight matrices.

    Every enabled target contributes an ``h_in x rank`` and an
    ``h_out x rank`` matrix per layer; tensor/pipeline sharding divides the
    total (rounded up to whole bytes).
    """
    _check_sharding(shard)
    return _ceil_div(_raw_param_bytes(cfg, model), shard.model_shards)


def lora_state_memory(cfg: LoraConfig, model: ModelSpec, shard: ShardingSpec) -> MemoryBreakdown:
    """Full per-device training state for one adapter.

    Gradients mirror the parameters; AdamW adds two moment buffers.
    Activations are ``n_layers * n_targets * batch * seq * rank * c_prec``
    bytes.  TP/PP divides every component; ZeRO-1 shards the optimizer
    state, ZeRO-2 also the gradients, ZeRO-3 also the parameters.
    """
    _check_sharding(shard)
    param0 = _raw_param_bytes(cfg, model)
    grad0 = GRAD_COPIES * param0
    opt0 = OPT_COPIES * param0
    act0 = (model.n_layers * len(model.target_modules)
            * cfg.batch_size * cfg.seq_len * cfg.rank * model.c_prec)

    shards = shard.model_shards
    param = _ceil_div(param0, shards)
    grad = _ceil_div(grad0, shards)
    opt = _ceil_div(opt0, shards)
    act = _ceil_div(act0, shards)

    if shard.zero_level >= 1:
        opt = _ceil_div(opt, shard.d_fsdp)
    if shard.zero_level >= 2:
        grad = _ceil_div(grad, shard.d_fsdp)
    if shard.zero_level >= 3:
        param = _ceil_div(param, shard.d_fsdp)
    return MemoryBreakdown(param_bytes=param, grad_bytes=grad, opt_bytes=opt, act_bytes=act)


def base_memory(model: ModelSpec, shard: ShardingSpec, b_total: int, s: int) -> int:
    """Per-device bytes for the shared base model at total packed batch ``b_total``.

    Weights are ``base_param_count * c_prec`` and activations are estimated
    from the calibrated coefficients; both divide across TP/PP shards.  The
    caller passes the workload's maximum sequence length for ``s``.
    """
    _check_sharding(shard)
    if b_total < 0:
        raise ValueError(f"b_total must be >= 0 (got {b_total})")
    shards = shard.model_shards
    weights = _ceil_div(model.base_param_count * model.c_prec, shards)
    act = math.ceil(model.act_coeff_sum * b_total * s * model.c_prec / shards)
    return weights + act


def job_memory(configs: Sequence[LoraConfig], degree: int, model: ModelSpec,
               pool: GpuPool, s_max: int | None = None) -> tuple[int, bool]:
    """Per-device bytes for a packed job and whether it fits the budget.

    The job runs tensor-parallel across ``degree`` devices; feasibility is
    per device against ``load_factor * mem_per_gpu``.  An empty config list
    degenerates to the base-model fit.
    """
    shard = ShardingSpec.tensor_parallel(degree)
    b_total = sum(c.batch_size for c in configs)
    if s_max is None:
        s_max = max((c.seq_len for c in configs), default=1)
    total = base_memory(model, shard, b_total, s_max)
    total += sum(lora_state_memory(c, model, shard).total_bytes for c in configs)
    return total, total <= pool.memory_budget


def lora_flop(cfg: LoraConfig, model: ModelSpec) -> int:
    """Adapter FLOPs for one optimizer step; exactly linear in rank.

    Each target contributes the down- and up-projection matmuls
    (``2*b*s*r*(h_in+h_out)``) per layer, counted once forward and twice
    backward.
    """
    per_layer = sum(
        2 * cfg.batch_size * cfg.seq_len * cfg.rank * (t.h_in + t.h_out)
        for t in model.target_modules)
    return per_layer * model.n_layers * 3


# --- iteration-time model ---------------------------------------------------


def adapter_load(rank: int, batch_size: int, seq_len: int, scale: float = 1.0) -> float:
    """Scalar load one adapter puts on a packed iteration."""
    return rank * batch_size * seq_len * scale


@dataclass(frozen=True)
class TimeModel:
    """Affine per-degree iteration-time model.

    ``coeffs`` maps a parallelism degree to ``(base_s, marginal_s)``: the
    empty-pack iteration time and the per-unit-load marginal cost.
    """

    coeffs: Mapping[int, tuple[float, float]]
    load_scale: float = 1.0
    fit_rel_rmse: Mapping[int, float] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for degree, (base_s, marginal_s) in self.coeffs.items():
            if not base_s > 0:
                raise ValueError(f"base time must be > 0 for degree {degree} (got {base_s})")
            if marginal_s < 0:
                raise ValueError(f"marginal time must be >= 0 for degree {degree} (got {marginal_s})")

    @property
    def degrees(self) -> tuple[int, ...]:
        return tuple(sorted(self.coeffs))

    def has_degree(self, degree: int) -> bool:
        return degree in self.coeffs

    def params(self, degree: int) -> tuple[float, float]:
        try:
            return self.coeffs[degree]
        except KeyError:
            raise CalibrationError(f"no calibration for degree {degree}") from None

    def load(self, cfg: LoraConfig) -> float:
        return adapter_load(cfg.rank, cfg.batch_size, cfg.seq_len, self.load_scale)

    def iter_time(self, degree: int, configs: Iterable[LoraConfig]) -> float:
        base_s, marginal_s = self.params(degree)
        return base_s + marginal_s * sum(self.load(c) for c in configs)


def job_time(tm: TimeModel, configs: Sequence[LoraConfig], degree: int) -> float:
    """Predicted duration of one packed job: iteration time times the step
    count of the longest-running configuration."""
    if not configs:
        raise ValueError("job_time needs at least one configuration")
    steps = max(c.train_steps for c in configs)
    if steps < 1:
        raise ValueError(f"train_steps must be >= 1 (got {steps})")
    return tm.iter_time(degree, configs) * steps


def _record_load(record: ProfileRecord, scale: float) -> float:
    return sum(adapter_load(r, b, record.seq_len, scale)
               for r, b in zip(record.packed_ranks, record.packed_batch_sizes))


def calibrate_time_model(profiles: Sequence[ProfileRecord], load_scale: float = 1.0,
                         max_rel_rmse: float = 0.25) -> TimeModel:
    """Least-squares fit of the affine iteration-time model, per degree.

    Needs at least two records spanning two distinct loads per degree and
    refuses fits whose relative RMSE exceeds ``max_rel_rmse`` or whose
    coefficients are unphysical (non-positive base, negative marginal).
    """
    if not profiles:
        raise CalibrationError("no profile records given")
    by_degree: dict[int, list[ProfileRecord]] = {}
    for record in profiles:
        by_degree.setdefault(record.parallelism_degree, []).append(record)

    coeffs: dict[int, tuple[float, float]] = {}
    rmse: dict[int, float] = {}
    for degree in sorted(by_degree):
        records = by_degree[degree]
        if len(records) < 2:
            raise CalibrationError(
                f"need at least 2 profile records for degree {degree}, got {len(records)}")
        loads = np.array([_record_load(r, load_scale) for r in records])
        times = np.array([r.iter_time_s for r in records])
        if len(np.unique(loads)) < 2:
            raise CalibrationError(
                f"degenerate design for degree {degree}: all records have load {loads[0]}")
        design = np.column_stack([np.ones_like(loads), loads])
        (base_s, marginal_s), *_ = np.linalg.lstsq(design, times, rcond=None)
        predicted = design @ np.array([base_s, marginal_s])
        rel = float(np.sqrt(np.mean((predicted - times) ** 2)) / np.mean(times))
        if rel > max_rel_rmse:
            raise CalibrationError(
                f"fit quality failure for degree {degree}: relative RMSE {rel:.3f} "
                f"exceeds {max_rel_rmse}")
        # Numerically-zero negatives from lstsq round-off are clamped.
        if abs(marginal_s) < 1e-15 * max(1.0, base_s):
            marginal_s = 0.0
        if not base_s > 0 or marginal_s < 0:
            raise CalibrationError(
                f"fit quality failure for degree {degree}: unphysical coefficients "
                f"base={base_s:.6g} marginal={marginal_s:.6g}")
        coeffs[degree] = (float(base_s), float(marginal_s))
        rmse[degree] = rel
        logger.debug("calibrated degree=%d base=%.6g marginal=%.6g rel_rmse=%.3g",
                     degree, base_s, marginal_s, rel)
    return TimeModel(coeffs=coeffs, load_scale=load_scale, fit_rel_rmse=rmse)


# --- profile file format ----------------------------------------------------
#
# Delimited text with header: degree,ranks,batch_sizes,seq_len,iter_time_s
# where ranks and batch_sizes are '+'-joined integer lists.

_PROFILE_FIELDS = ["degree", "ranks", "batch_sizes", "seq_len", "iter_time_s"]


def _parse_int_list(text: str, field_name: str, line: int) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split("+"))
    except ValueError:
        raise WorkloadSyntaxError(
            f"profiles line {line}: field '{field_name}' must be '+'-joined integers "
            f"(got {text!r})") from None


def read_profiles(text: str) -> tuple[ProfileRecord, ...]:
    """Parse the tabular profile-record format."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != _PROFILE_FIELDS:
        raise WorkloadSyntaxError(
            f"profiles: expected header {','.join(_PROFILE_FIELDS)} (got {reader.fieldnames})")
    records = []
    for i, row in enumerate(reader, start=2):
        try:
            record = ProfileRecord(
                parallelism_degree=int(row["degree"]),
                packed_ranks=_parse_int_list(row["ranks"], "ranks", i),
                packed_batch_sizes=_parse_int_list(row["batch_sizes"], "batch_sizes", i),
                seq_len=int(row["seq_len"]),
                iter_time_s=float(row["iter_time_s"]),
            )
        except (TypeError, ValueError, KeyError):
            raise WorkloadSyntaxError(f"profiles line {i}: malformed row {row!r}") from None
        if len(record.packed_ranks) != len(record.packed_batch_sizes):
            raise WorkloadValidationError(
                f"profiles line {i}: ranks and batch_sizes must have the same length")
        if record.iter_time_s <= 0:
            raise WorkloadValidationError(f"profiles line {i}: iter_time_s must be > 0")
        records.append(record)
    return tuple(records)


def write_profiles(records: Iterable[ProfileRecord]) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(_PROFILE_FIELDS)
    for r in records:
        writer.writerow([
            r.parallelism_degree,
            "+".join(str(v) for v in r.packed_ranks),
            "+".join(str(v) for v in r.packed_batch_sizes),
            r.seq_len,
            repr(r.iter_time_s),
        ])
    return out.getvalue()


# --- shared memory bookkeeping ----------------------------------------------


class MemoryContext:
    """Per-degree memory bookkeeping shared by packing and planning.

    A job's per-device footprint decomposes into the degree's base-weight
    bytes plus one weight per packed configuration (adapter state + that
    configuration's share of base activations).  The per-config rounding is
    conservative with respect to the joint ``job_memory`` formula, so every
    selection accepted here also satisfies the per-device budget check.
    """

    def __init__(self, model: ModelSpec, pool: GpuPool,
                 configs: Iterable[LoraConfig], seq_len_max: int | None = None):
        self.model = model
        self.pool = pool
        self.configs_by_id: dict[str, LoraConfig] = {}
        for cfg in configs:
            if cfg.id in self.configs_by_id:
                raise WorkloadValidationError(f"duplicate id '{cfg.id}'")
            self.configs_by_id[cfg.id] = cfg
        if seq_len_max is None:
            seq_len_max = max((c.seq_len for c in self.configs_by_id.values()), default=1)
        self.seq_len_max = seq_len_max
        self._base_cache: dict[int, int] = {}
        self._adapter_cache: dict[tuple[str, int], int] = {}

    def config(self, config_id: str) -> LoraConfig:
        try:
            return self.configs_by_id[config_id]
        except KeyError:
            raise KeyError(f"unknown configuration '{config_id}'") from None

    def base_weight_bytes(self, degree: int) -> int:
        if degree not in self._base_cache:
            shard = ShardingSpec.tensor_parallel(degree)
            self._base_cache[degree] = base_memory(self.model, shard, 0, self.seq_len_max)
        return self._base_cache[degree]

    def adapter_bytes(self, config_id: str, degree: int) -> int:
        key = (config_id, degree)
        if key not in self._adapter_cache:
            cfg = self.config(config_id)
            shard = ShardingSpec.tensor_parallel(degree)
            state = lora_state_memory(cfg, self.model, shard).total_bytes
            base_act = math.ceil(
                self.model.act_coeff_sum * cfg.batch_size * self.seq_len_max
                * self.model.c_prec / shard.model_shards)
            self._adapter_cache[key] = state + base_act
        return self._adapter_cache[key]

    def capacity(self, degree: int) -> float:
        """Bytes left for adapters once the base model is resident."""
        return self.pool.memory_budget - self.base_weight_bytes(degree)

    def job_bytes(self, config_ids: Iterable[str], degree: int) -> int:
        return self.base_weight_bytes(degree) + sum(
            self.adapter_bytes(cid, degree) for cid in config_ids)

    def fits(self, config_ids: Iterable[str], degree: int) -> bool:
        return self.job_bytes(config_ids, degree) <= self.pool.memory_budget

    def min_feasible_degree(self, config_id: str, gpu_count: int) -> int | None:
        """Smallest power-of-two degree the configuration fits at, if any."""
        degree = 1
        while degree <= gpu_count:
            if self.fits([config_id], degree):
                return degree
            degree *= 2
        return None
