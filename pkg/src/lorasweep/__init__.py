"""lorasweep: plan, simulate, and verify packed LoRA hyperparameter sweeps.

Given a hyperparameter search space and a GPU-pool description, the toolkit
packs LoRA configurations into fine-tuning jobs, assigns power-of-two
parallelism degrees, orders the jobs to approximately minimize makespan,
simulates the schedule, and verifies the packed-adapter forward/backward
mathematics at desk scale.
"""

__version__ = "0.1.0"

from .workload import (
    GpuPool,
    LoraConfig,
    ModelSpec,
    ProfileRecord,
    ShardingSpec,
    TargetModule,
    WorkloadSpec,
    WorkloadSyntaxError,
    WorkloadValidationError,
    config_id,
    enumerate_grid,
    parse_workload,
    serialize_workload,
    validate_config,
    workload_digest,
)
from .costmodel import (
    CalibrationError,
    MemoryBreakdown,
    MemoryContext,
    TimeModel,
    adapter_load,
    base_memory,
    calibrate_time_model,
    job_memory,
    job_time,
    lora_flop,
    lora_param_memory,
    lora_state_memory,
    read_profiles,
    write_profiles,
)
from .packing import (
    NoFeasiblePacking,
    PackingSolution,
    brute_force_subproblem,
    solve_subproblem,
)
from .planner import (
    Job,
    JobQueue,
    PlannedBatch,
    PlannerStats,
    SchedulingPolicy,
    TailBound,
    UnschedulableError,
    ar_bound,
    dtm,
    max_gpu_queue,
    min_gpu_queue,
    parse_queue,
    plan_jobs,
    serialize_queue,
)
from .simulator import (
    BruteForceJob,
    ScheduleTrace,
    SimulationError,
    TraceJob,
    brute_force_makespan,
    check_feasibility,
    simulate,
    trace_summary,
    trace_table,
)
from .lorapack import (
    AdapterWeights,
    GradCheckReport,
    PackedAdapters,
    adapter_backward,
    adapter_forward,
    grad_check,
    pack_adapters,
    packed_backward,
    packed_forward,
    unpack_adapters,
)
