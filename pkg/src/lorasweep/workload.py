"""Search-space, model, and GPU-pool descriptions.

The types here are the vocabulary of the whole toolkit: a ``LoraConfig`` is
one point of the hyperparameter search space, a ``ModelSpec`` describes the
frozen base model as far as the memory/FLOP model cares, and a ``GpuPool``
describes the hardware the sweep runs on.  Everything is an immutable value
type; validation is explicit and returns violations as data.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence

__all__ = [
    "WorkloadSyntaxError",
    "WorkloadValidationError",
    "TargetModule",
    "ModelSpec",
    "GpuPool",
    "ShardingSpec",
    "LoraConfig",
    "ProfileRecord",
    "WorkloadSpec",
    "config_id",
    "enumerate_grid",
    "validate_config",
    "validate_model",
    "validate_pool",
    "validate_sharding",
    "parse_workload",
    "serialize_workload",
    "workload_digest",
]

MAX_TARGET_MODULES = 7
ZERO_LEVELS = (0, 1, 2, 3)


class WorkloadSyntaxError(ValueError):
    """The input document is not syntactically valid."""


class WorkloadValidationError(ValueError):
    """The input document parses but violates an invariant."""


@dataclass(frozen=True)
class TargetModule:
    """One projection the adapters attach to (q/k/v/output/up/down/gate)."""

    name: str
    h_in: int
    h_out: int


@dataclass(frozen=True)
class ModelSpec:
    """Base-model architecture parameters used by the memory and FLOP model.

    The activation coefficients are calibration inputs for the base-model
    activation estimate (bytes = coeff_sum * total_batch * seq_len * c_prec);
    they are not derived from the architecture.
    """

    name: str
    n_layers: int
    target_modules: tuple[TargetModule, ...]
    base_param_count: int
    c_prec: int
    embed_act_coeff: float = 0.0
    attn_act_coeff: float = 0.0
    mlp_act_coeff: float = 0.0

    @property
    def act_coeff_sum(self) -> float:
        return self.embed_act_coeff + self.attn_act_coeff + self.mlp_act_coeff

    @property
    def min_projection_dim(self) -> int:
        return min(min(t.h_in, t.h_out) for t in self.target_modules)


@dataclass(frozen=True)
class GpuPool:
    """A homogeneous pool of GPUs.

    ``load_factor`` is the usable fraction of device memory; it covers
    allocator fragmentation and alike, so feasibility checks compare against
    ``load_factor * mem_per_gpu``.
    """

    gpu_count: int
    mem_per_gpu: int
    load_factor: float = 1.0

    @property
    def memory_budget(self) -> float:
        """Usable bytes per device."""
        return self.load_factor * self.mem_per_gpu


@dataclass(frozen=True)
class ShardingSpec:
    """Parallelism degrees a job runs with.

    Tensor/pipeline parallelism divides weights, gradients, optimizer state
    and activations across ``d_tp * d_pp`` devices.  FSDP sharding is
    expressed as a ZeRO level (1: optimizer state, 2: +gradients,
    3: +parameters) over ``d_fsdp`` devices.  Mixing TP/PP with ZeRO in one
    job is rejected.
    """

    d_tp: int = 1
    d_pp: int = 1
    d_fsdp: int = 1
    zero_level: int = 0

    @property
    def model_shards(self) -> int:
        return self.d_tp * self.d_pp

    @classmethod
    def tensor_parallel(cls, degree: int) -> "ShardingSpec":
        return cls(d_tp=degree)


@dataclass(frozen=True)
class LoraConfig:
    """One point in the hyperparameter search space.

    ``learning_rate`` is carried as metadata only; it does not affect memory
    or time costs.  ``train_steps`` is the work quantum: the number of
    optimizer steps this configuration trains for.
    """

    id: str
    rank: int
    alpha: float
    batch_size: int
    learning_rate: float
    seq_len: int
    train_steps: int


@dataclass(frozen=True)
class ProfileRecord:
    """One measured iteration of a packed fine-tuning job."""

    parallelism_degree: int
    packed_ranks: tuple[int, ...]
    packed_batch_sizes: tuple[int, ...]
    seq_len: int
    iter_time_s: float


@dataclass(frozen=True)
class WorkloadSpec:
    """A full planning problem: model + pool + the configuration set."""

    model: ModelSpec
    pool: GpuPool
    configs: tuple[LoraConfig, ...]
    profiles: tuple[ProfileRecord, ...] = ()

    def config_ids(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.configs)


def config_id(rank: int, alpha: float, batch_size: int, learning_rate: float,
              seq_len: int, train_steps: int) -> str:
    """Deterministic content hash of the hyperparameter tuple."""
    key = "|".join([
        str(int(rank)),
        repr(float(alpha)),
        str(int(batch_size)),
        repr(float(learning_rate)),
        str(int(seq_len)),
        str(int(train_steps)),
    ])
    return "cfg-" + hashlib.sha256(key.encode("utf-8")).hexdigest()[:12]


def enumerate_grid(learning_rates: Sequence[float],
                   batch_sizes: Sequence[int],
                   ranks: Sequence[int],
                   alphas: Sequence[float],
                   template: LoraConfig) -> list[LoraConfig]:
    """Cartesian product of the four tuned hyperparameters.

    Every grid point inherits ``seq_len`` and ``train_steps`` from the
    template and is stamped with a deterministic content-hash id.  The result
    length is the product of the four list lengths.
    """
    names = ("learning_rates", "batch_sizes", "ranks", "alphas")
    for name, values in zip(names, (learning_rates, batch_sizes, ranks, alphas)):
        if len(values) == 0:
            raise WorkloadValidationError(f"empty range list for '{name}'")
    out = []
    for lr, bs, rank, alpha in itertools.product(learning_rates, batch_sizes, ranks, alphas):
        out.append(replace(
            template,
            id=config_id(rank, alpha, bs, lr, template.seq_len, template.train_steps),
            rank=int(rank),
            alpha=float(alpha),
            batch_size=int(bs),
            learning_rate=float(lr),
        ))
    return out


def validate_config(cfg: LoraConfig, model: ModelSpec) -> list[str]:
    """Return every violated invariant of ``cfg`` (empty list means valid)."""
    violations = []
    if cfg.rank < 1:
        violations.append(f"rank must be >= 1 (got {cfg.rank})")
    if cfg.batch_size < 1:
        violations.append(f"batch_size must be >= 1 (got {cfg.batch_size})")
    if cfg.seq_len < 1:
        violations.append(f"seq_len must be >= 1 (got {cfg.seq_len})")
    if cfg.train_steps < 1:
        violations.append(f"train_steps must be >= 1 (got {cfg.train_steps})")
    if not cfg.alpha > 0:
        violations.append(f"alpha must be > 0 (got {cfg.alpha})")
    if not cfg.learning_rate > 0:
        violations.append(f"learning_rate must be > 0 (got {cfg.learning_rate})")
    if cfg.rank >= 1:
        for target in model.target_modules:
            limit = min(target.h_in, target.h_out)
            if cfg.rank > limit:
                violations.append(
                    f"rank {cfg.rank} exceeds projection dimension {limit} "
                    f"(target '{target.name}')")
    return violations


def validate_model(model: ModelSpec) -> list[str]:
    violations = []
    if model.n_layers < 1:
        violations.append(f"n_layers must be >= 1 (got {model.n_layers})")
    if not model.target_modules:
        violations.append("at least one target module must be enabled")
    if len(model.target_modules) > MAX_TARGET_MODULES:
        violations.append(
            f"at most {MAX_TARGET_MODULES} target modules allowed "
            f"(got {len(model.target_modules)})")
    for target in model.target_modules:
        if target.h_in < 1 or target.h_out < 1:
            violations.append(
                f"target '{target.name}' dimensions must be positive "
                f"(got {target.h_in}x{target.h_out})")
    if model.base_param_count < 0:
        violations.append("base_param_count must be >= 0")
    if model.c_prec < 1:
        violations.append(f"c_prec must be a positive byte count (got {model.c_prec})")
    for name in ("embed_act_coeff", "attn_act_coeff", "mlp_act_coeff"):
        if getattr(model, name) < 0:
            violations.append(f"{name} must be >= 0")
    return violations


def validate_pool(pool: GpuPool) -> list[str]:
    violations = []
    if pool.gpu_count < 1:
        violations.append(f"gpu_count must be >= 1 (got {pool.gpu_count})")
    if pool.mem_per_gpu <= 0:
        violations.append(f"mem_per_gpu must be > 0 (got {pool.mem_per_gpu})")
    if not 0 < pool.load_factor <= 1:
        violations.append(f"load_factor must be in (0, 1] (got {pool.load_factor})")
    return violations


def validate_sharding(shard: ShardingSpec) -> list[str]:
    violations = []
    for name in ("d_tp", "d_pp", "d_fsdp"):
        if getattr(shard, name) < 1:
            violations.append(f"{name} must be >= 1 (got {getattr(shard, name)})")
    if shard.zero_level not in ZERO_LEVELS:
        violations.append(f"invalid ZeRO level {shard.zero_level} (expected one of {ZERO_LEVELS})")
    if shard.model_shards > 1 and shard.zero_level != 0:
        violations.append("tensor/pipeline sharding cannot be combined with ZeRO sharding")
    if shard.d_fsdp > 1 and shard.zero_level == 0:
        violations.append("d_fsdp > 1 requires a ZeRO level")
    return violations


# --- document ingestion ----------------------------------------------------
#
# A workload file is one JSON document with keys `model`, `pool`, `configs`,
# optional `defaults` (per-config fallbacks) and optional `profiles`.


def _type_name(expected) -> str:
    return {dict: "an object", list: "an array", str: "a string",
            int: "an integer", float: "a number", bool: "a boolean"}[expected]


def _require(mapping: Mapping[str, Any], key: str, expected, ctx: str) -> Any:
    if key not in mapping:
        raise WorkloadValidationError(f"{ctx}: missing field '{key}'")
    value = mapping[key]
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise WorkloadValidationError(f"{ctx}: field '{key}' must be a number")
        return float(value)
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise WorkloadValidationError(f"{ctx}: field '{key}' must be an integer")
        return value
    if not isinstance(value, expected):
        raise WorkloadValidationError(f"{ctx}: field '{key}' must be {_type_name(expected)}")
    return value


def _optional(mapping: Mapping[str, Any], key: str, expected, ctx: str, default):
    if key not in mapping:
        return default
    return _require(mapping, key, expected, ctx)


def _parse_model(raw: Mapping[str, Any]) -> ModelSpec:
    ctx = "model"
    targets = []
    for i, entry in enumerate(_require(raw, "target_modules", list, ctx)):
        tctx = f"model.target_modules[{i}]"
        if not isinstance(entry, dict):
            raise WorkloadValidationError(f"{tctx}: must be an object")
        targets.append(TargetModule(
            name=_require(entry, "name", str, tctx),
            h_in=_require(entry, "h_in", int, tctx),
            h_out=_require(entry, "h_out", int, tctx),
        ))
    coeffs = _optional(raw, "activation_coeffs", dict, ctx, {})
    model = ModelSpec(
        name=_require(raw, "name", str, ctx),
        n_layers=_require(raw, "n_layers", int, ctx),
        target_modules=tuple(targets),
        base_param_count=_require(raw, "base_param_count", int, ctx),
        c_prec=_require(raw, "c_prec", int, ctx),
        embed_act_coeff=_optional(coeffs, "embed", float, "model.activation_coeffs", 0.0),
        attn_act_coeff=_optional(coeffs, "attn", float, "model.activation_coeffs", 0.0),
        mlp_act_coeff=_optional(coeffs, "mlp", float, "model.activation_coeffs", 0.0),
    )
    violations = validate_model(model)
    if violations:
        raise WorkloadValidationError("model: " + "; ".join(violations))
    return model


def _parse_pool(raw: Mapping[str, Any]) -> GpuPool:
    ctx = "pool"
    pool = GpuPool(
        gpu_count=_require(raw, "gpu_count", int, ctx),
        mem_per_gpu=_require(raw, "mem_per_gpu", int, ctx),
        load_factor=_optional(raw, "load_factor", float, ctx, 1.0),
    )
    violations = validate_pool(pool)
    if violations:
        raise WorkloadValidationError("pool: " + "; ".join(violations))
    return pool


def _parse_config(raw: Any, index: int, defaults: Mapping[str, Any]) -> LoraConfig:
    ctx = f"configs[{index}]"
    if not isinstance(raw, dict):
        raise WorkloadValidationError(f"{ctx}: must be an object")

    def pick(key: str, expected):
        if key in raw:
            return _require(raw, key, expected, ctx)
        if key in defaults:
            return _require(defaults, key, expected, "defaults")
        raise WorkloadValidationError(f"{ctx}: missing field '{key}' (no default given)")

    rank = pick("rank", int)
    alpha = pick("alpha", float)
    batch_size = pick("batch_size", int)
    learning_rate = pick("learning_rate", float)
    seq_len = pick("seq_len", int)
    train_steps = pick("train_steps", int)
    cid = raw.get("id")
    if cid is None:
        cid = config_id(rank, alpha, batch_size, learning_rate, seq_len, train_steps)
    elif not isinstance(cid, str) or not cid:
        raise WorkloadValidationError(f"{ctx}: field 'id' must be a non-empty string")
    return LoraConfig(id=cid, rank=rank, alpha=alpha, batch_size=batch_size,
                      learning_rate=learning_rate, seq_len=seq_len, train_steps=train_steps)


def _parse_profile(raw: Any, index: int) -> ProfileRecord:
    ctx = f"profiles[{index}]"
    if not isinstance(raw, dict):
        raise WorkloadValidationError(f"{ctx}: must be an object")
    ranks = _require(raw, "ranks", list, ctx)
    batch_sizes = _require(raw, "batch_sizes", list, ctx)
    record = ProfileRecord(
        parallelism_degree=_require(raw, "degree", int, ctx),
        packed_ranks=tuple(int(r) for r in ranks),
        packed_batch_sizes=tuple(int(b) for b in batch_sizes),
        seq_len=_require(raw, "seq_len", int, ctx),
        iter_time_s=_require(raw, "iter_time_s", float, ctx),
    )
    if len(record.packed_ranks) != len(record.packed_batch_sizes) or not record.packed_ranks:
        raise WorkloadValidationError(f"{ctx}: ranks and batch_sizes must be equal-length, non-empty lists")
    if record.iter_time_s <= 0:
        raise WorkloadValidationError(f"{ctx}: iter_time_s must be > 0")
    if record.parallelism_degree < 1:
        raise WorkloadValidationError(f"{ctx}: degree must be >= 1")
    return record


def parse_workload(text: str) -> WorkloadSpec:
    """Parse and fully validate a workload document.

    Raises ``WorkloadSyntaxError`` with the position for malformed JSON and
    ``WorkloadValidationError`` naming the violated invariant otherwise.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WorkloadSyntaxError(
            f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise WorkloadValidationError("top level must be an object")

    model = _parse_model(_require(data, "model", dict, "workload"))
    pool = _parse_pool(_require(data, "pool", dict, "workload"))
    defaults = _optional(data, "defaults", dict, "workload", {})
    raw_configs = _require(data, "configs", list, "workload")
    if not raw_configs:
        raise WorkloadValidationError("configs: at least one configuration is required")

    configs = []
    seen: set[str] = set()
    for i, raw in enumerate(raw_configs):
        cfg = _parse_config(raw, i, defaults)
        if cfg.id in seen:
            raise WorkloadValidationError(f"configs[{i}]: duplicate id '{cfg.id}'")
        seen.add(cfg.id)
        violations = validate_config(cfg, model)
        if violations:
            raise WorkloadValidationError(f"config '{cfg.id}': " + "; ".join(violations))
        configs.append(cfg)

    profiles = tuple(_parse_profile(raw, i)
                     for i, raw in enumerate(_optional(data, "profiles", list, "workload", [])))
    return WorkloadSpec(model=model, pool=pool, configs=tuple(configs), profiles=profiles)


def _workload_to_dict(spec: WorkloadSpec) -> dict:
    return {
        "model": {
            "name": spec.model.name,
            "n_layers": spec.model.n_layers,
            "target_modules": [
                {"name": t.name, "h_in": t.h_in, "h_out": t.h_out}
                for t in spec.model.target_modules
            ],
            "base_param_count": spec.model.base_param_count,
            "c_prec": spec.model.c_prec,
            "activation_coeffs": {
                "embed": spec.model.embed_act_coeff,
                "attn": spec.model.attn_act_coeff,
                "mlp": spec.model.mlp_act_coeff,
            },
        },
        "pool": {
            "gpu_count": spec.pool.gpu_count,
            "mem_per_gpu": spec.pool.mem_per_gpu,
            "load_factor": spec.pool.load_factor,
        },
        "configs": [
            {
                "id": c.id,
                "rank": c.rank,
                "alpha": c.alpha,
                "batch_size": c.batch_size,
                "learning_rate": c.learning_rate,
                "seq_len": c.seq_len,
                "train_steps": c.train_steps,
            }
            for c in spec.configs
        ],
        "profiles": [
            {
                "degree": p.parallelism_degree,
                "ranks": list(p.packed_ranks),
                "batch_sizes": list(p.packed_batch_sizes),
                "seq_len": p.seq_len,
                "iter_time_s": p.iter_time_s,
            }
            for p in spec.profiles
        ],
    }


def serialize_workload(spec: WorkloadSpec) -> str:
    """Canonical document form; ``parse_workload`` round-trips it exactly."""
    return json.dumps(_workload_to_dict(spec), indent=2) + "\n"


def workload_digest(spec: WorkloadSpec) -> str:
    """Stable content hash used to tie queue and report files to their input."""
    compact = json.dumps(_workload_to_dict(spec), separators=(",", ":"), sort_keys=True)
    return hashlib.sha256(compact.encode("utf-8")).hexdigest()
