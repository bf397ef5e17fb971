"""Shared synthetic-instance builders for the test suite.

The memory model is exercised through a one-layer, one-target model whose
adapter footprint at degree 1 is ``r * (16*h*c_prec/2 + ...)`` bytes, so the
budget can be tuned to admit a chosen number of adapters per job.
"""

from __future__ import annotations

import numpy as np

from lorasweep import (
    GpuPool,
    LoraConfig,
    MemoryContext,
    ModelSpec,
    ShardingSpec,
    TargetModule,
    TimeModel,
    lora_state_memory,
)

HIDDEN = 1 << 20  # adapter bytes scale: 16 * HIDDEN * rank at c_prec=2


def tiny_model(h: int = HIDDEN, layers: int = 1, prec: int = 2,
               base_params: int = 0, act_coeff: float = 0.0) -> ModelSpec:
    return ModelSpec(
        name="synthetic",
        n_layers=layers,
        target_modules=(TargetModule("q", h, h),),
        base_param_count=base_params,
        c_prec=prec,
        attn_act_coeff=act_coeff,
    )


def make_config(cid: str, rank: int = 8, batch_size: int = 1, seq_len: int = 16,
                train_steps: int = 1, alpha: float = 16.0,
                learning_rate: float = 1e-4) -> LoraConfig:
    return LoraConfig(id=cid, rank=rank, alpha=alpha, batch_size=batch_size,
                      learning_rate=learning_rate, seq_len=seq_len,
                      train_steps=train_steps)


def adapter_bytes(cfg: LoraConfig, model: ModelSpec, degree: int = 1) -> int:
    return lora_state_memory(cfg, model, ShardingSpec.tensor_parallel(degree)).total_bytes


def degree_speedup_tm(degrees, base0: float = 1.0, gamma: float = 0.5,
                      marginal0: float = 0.0) -> TimeModel:
    """Iteration time shrinks like d**-gamma with degree."""
    return TimeModel(coeffs={d: (base0 * d ** -gamma, marginal0 * d ** -gamma)
                             for d in degrees})


def pool_for(model: ModelSpec, configs, adapters_per_gpu: float,
             gpu_count: int = 8, load_factor: float = 1.0) -> GpuPool:
    """Budget sized to hold the base model plus a chosen number of
    average-footprint adapters per device at degree 1."""
    shard = ShardingSpec.tensor_parallel(1)
    base = model.base_param_count * model.c_prec
    mean_adapter = float(np.mean([adapter_bytes(c, model) for c in configs]))
    budget = int(base + adapters_per_gpu * mean_adapter)
    return GpuPool(gpu_count=gpu_count, mem_per_gpu=budget, load_factor=load_factor)


def random_subproblem_instance(rng: np.random.Generator, max_configs: int = 12,
                               uniform_steps: bool = False):
    """A random packing instance: (degree, configs, tm, mem)."""
    model = tiny_model(base_params=int(rng.integers(0, 2)) * 500_000_000)
    n = int(rng.integers(1, max_configs + 1))
    configs = []
    for i in range(n):
        configs.append(make_config(
            f"c{i:02d}",
            rank=int(rng.integers(1, 17)),
            batch_size=int(rng.integers(1, 5)),
            seq_len=int(rng.choice([8, 16, 32])),
            train_steps=1 if uniform_steps else int(rng.integers(1, 4)),
        ))
    degree = int(rng.choice([1, 2, 4, 8]))
    pool = pool_for(model, configs, adapters_per_gpu=float(rng.uniform(0.5, n)),
                    gpu_count=8)
    tm = TimeModel(coeffs={
        d: (float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.0, 2e-4)))
        for d in (1, 2, 4, 8)
    }, load_scale=1.0)
    mem = MemoryContext(model, pool, configs)
    return degree, configs, tm, mem


def random_planner_instance(rng: np.random.Generator):
    """A desk-scale planning instance: (gpu_count, configs, tm, mem, pool).

    Sized for the exact makespan oracle (<= 6 configs, <= 4 GPUs).  Step
    counts are uniform within an instance; duration variety comes from the
    marginal load cost.  Most instances fit every config at degree 1; a
    minority need degree >= 2 so the tail-bound preconditions get exercised
    on both sides.
    """
    gpu_count = int(rng.choice([2, 2, 4, 4, 4]))
    n = int(rng.integers(2, 7))
    steps = int(rng.integers(1, 4))
    configs = [make_config(
        f"c{i:02d}",
        rank=int(rng.integers(1, 9)),
        batch_size=1,
        seq_len=int(rng.choice([8, 16, 32])),
        train_steps=steps,
    ) for i in range(n)]
    if rng.uniform() < 0.2:
        base_params = 12 * HIDDEN  # base weights force degree >= 2 at tight budgets
    else:
        base_params = 0
    model = tiny_model(base_params=base_params)
    pool = pool_for(model, configs, adapters_per_gpu=float(rng.uniform(1.2, 3.5)),
                    gpu_count=gpu_count)
    gamma = float(rng.uniform(0.0, 0.7))
    tm = TimeModel(coeffs={
        d: (float(rng.uniform(0.5, 2.0)) * d ** -gamma,
            float(rng.uniform(0.0, 2e-3)))
        for d in (1, 2, 4)
    })
    mem = MemoryContext(model, pool, configs)
    return gpu_count, configs, tm, mem, pool


def multi_batch_instance(rng: np.random.Generator):
    """A medium instance whose queue spans several batches, so the tail job
    is short next to the makespan: (gpu_count, configs, tm, mem, pool)."""
    gpu_count = int(rng.choice([4, 8]))
    n = int(rng.integers(6 * gpu_count, 10 * gpu_count + 1))
    configs = [make_config(
        f"c{i:03d}",
        rank=int(rng.integers(4, 17)),
        batch_size=1,
        seq_len=16,
        train_steps=100,
    ) for i in range(n)]
    model = tiny_model()
    pool = pool_for(model, configs, adapters_per_gpu=float(rng.uniform(1.5, 2.5)),
                    gpu_count=gpu_count)
    gamma = float(rng.uniform(0.1, 0.5))
    tm = TimeModel(coeffs={
        d: (float(rng.uniform(0.01, 0.02)) * d ** -gamma,
            float(rng.uniform(0.0, 2e-5)))
        for d in (1, 2, 4, 8)
    })
    mem = MemoryContext(model, pool, configs)
    return gpu_count, configs, tm, mem, pool


def sweep_shaped_instance(rng: np.random.Generator, n_configs: int = 120,
                          gpu_count: int = 8):
    """An instance shaped like a full sweep: 120 configurations on 8 GPUs,
    tight per-job capacity, near-uniform step counts."""
    configs = [make_config(
        f"c{i:03d}",
        rank=int(rng.choice([8, 16, 32])),
        batch_size=int(rng.choice([1, 2, 4])),
        seq_len=64,
        train_steps=100,
    ) for i in range(n_configs)]
    model = tiny_model(base_params=2 * HIDDEN)
    pool = pool_for(model, configs, adapters_per_gpu=2.0, gpu_count=gpu_count)
    tm = TimeModel(coeffs={
        d: (0.05 * d ** -0.3, 1e-7 * d ** -0.3)
        for d in (1, 2, 4, 8)
    })
    mem = MemoryContext(model, pool, configs)
    return gpu_count, configs, tm, mem, pool
