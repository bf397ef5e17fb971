"""Command-line front end: plan, simulate, calibrate, verify-kernels, report.

Every command is idempotent over identical inputs and writes documents with
stable key ordering.  Failure categories map to distinct exit codes so
scripts can branch on them.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .costmodel import (
    CalibrationError,
    MemoryContext,
    TimeModel,
    calibrate_time_model,
    read_profiles,
)
from .lorapack import AdapterWeights, grad_check, pack_adapters, packed_backward, \
    packed_forward, adapter_backward, adapter_forward
from .packing import NoFeasiblePacking
from .planner import (
    UnschedulableError,
    ar_bound,
    max_gpu_queue,
    min_gpu_queue,
    parse_queue,
    plan_jobs,
    serialize_queue,
)
from .simulator import SimulationError, simulate, trace_table, trace_summary
from .workload import (
    WorkloadSpec,
    WorkloadSyntaxError,
    WorkloadValidationError,
    parse_workload,
    workload_digest,
)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_SYNTAX = 2
EXIT_VALIDATION = 3
EXIT_CALIBRATION = 4
EXIT_INFEASIBLE = 5
EXIT_DIGEST = 6
EXIT_VERIFY = 7

logger = logging.getLogger(__name__)


class DigestMismatch(RuntimeError):
    pass


def _fail(category: str, code: int, message: str) -> int:
    print(f"error[{category}]: {message}", file=sys.stderr)
    return code


def _load_workload(args) -> WorkloadSpec:
    text = Path(args.workload).read_text()
    spec = parse_workload(text)
    if getattr(args, "load_factor", None) is not None:
        spec = replace(spec, pool=replace(spec.pool, load_factor=args.load_factor))
    return spec


def _time_model(spec: WorkloadSpec, profiles_path: str | None) -> TimeModel:
    if profiles_path is not None:
        records = read_profiles(Path(profiles_path).read_text())
    else:
        records = spec.profiles
    if not records:
        raise CalibrationError(
            "no profile records: pass --profiles or embed them in the workload")
    return calibrate_time_model(records)


def cmd_plan(args) -> int:
    """Calibrate, plan, and write the job-queue document."""
    spec = _load_workload(args)
    tm = _time_model(spec, args.profiles)
    mem = MemoryContext(spec.model, spec.pool, spec.configs)
    queue = plan_jobs(spec.pool.gpu_count, spec.configs, tm, mem,
                      workload_digest=workload_digest(spec))
    out = serialize_queue(queue)
    Path(args.out).write_text(out)
    print(f"planned {len(queue.jobs())} jobs in {len(queue.batches)} batches -> {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    """Simulate the planned queue plus both baselines and write the report."""
    spec = _load_workload(args)
    queue = parse_queue(Path(args.queue).read_text())
    digest = workload_digest(spec)
    if queue.workload_digest and queue.workload_digest != digest:
        raise DigestMismatch(
            f"queue was planned for workload {queue.workload_digest[:12]}..., "
            f"got {digest[:12]}...")
    tm = _time_model(spec, args.profiles)
    mem = MemoryContext(spec.model, spec.pool, spec.configs)
    configs = {c.id: c for c in spec.configs}

    planned = simulate(queue, spec.pool, tm, configs)
    min_q = min_gpu_queue(spec.configs, spec.pool.gpu_count, tm, mem)
    max_q = max_gpu_queue(spec.configs, spec.pool.gpu_count, tm, mem)
    min_trace = simulate(min_q, spec.pool, tm, configs)
    max_trace = simulate(max_q, spec.pool, tm, configs)
    tail = ar_bound(planned)
    summary = trace_summary(planned, spec.pool)

    queue_text = Path(args.queue).read_text()
    report = {
        "tool": {"name": "lorasweep", "version": __version__},
        "workload_digest": digest,
        "queue_digest": hashlib.sha256(queue_text.encode("utf-8")).hexdigest(),
        "queue_summary": {
            "batches": len(queue.batches),
            "jobs": len(queue.jobs()),
            "configs": len(queue.config_ids()),
        },
        "makespan_s": {
            "planned": planned.makespan,
            "min_gpu": min_trace.makespan,
            "max_gpu": max_trace.makespan,
        },
        "speedup": {
            "vs_min_gpu": min_trace.makespan / planned.makespan,
            "vs_max_gpu": max_trace.makespan / planned.makespan,
        },
        "utilization": summary["utilization"],
        "ar_bound": tail.bound,
        "tail_bound_preconditions": {
            "full_pre_tail_utilization": tail.full_pre_tail_utilization,
            "monotone_degrees": tail.monotone_degrees,
        },
        "jobs": trace_table(planned),
    }
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"simulated makespan {planned.makespan:.6g} s "
              f"(min-GPU {min_trace.makespan:.6g}, max-GPU {max_trace.makespan:.6g}) "
              f"-> {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    """Fit the iteration-time model from profile records."""
    records = read_profiles(Path(args.profiles).read_text())
    tm = calibrate_time_model(records)
    doc = {
        "load_scale": tm.load_scale,
        "degrees": {
            str(d): {
                "base_s": tm.coeffs[d][0],
                "marginal_s": tm.coeffs[d][1],
                "rel_rmse": tm.fit_rel_rmse.get(d),
            }
            for d in tm.degrees
        },
    }
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    for d in tm.degrees:
        base_s, marginal_s = tm.coeffs[d]
        print(f"degree {d}: base {base_s:.6g} s, marginal {marginal_s:.6g} s/load, "
              f"rel RMSE {tm.fit_rel_rmse.get(d, 0.0):.3g}")
    return EXIT_OK


def _verify_kernels(seed: int, trials: int) -> tuple[bool, list[str]]:
    rng = np.random.default_rng(seed)
    lines = []
    ok = True

    worst_fwd = 0.0
    worst_bwd = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 9))
        d = int(rng.integers(2, 17))
        k = int(rng.integers(2, 17))
        adapters, inputs, ups = [], [], []
        for _ in range(n):
            r = int(rng.integers(1, 7))
            tokens = int(rng.integers(1, 7))
            adapters.append(AdapterWeights(down=rng.standard_normal((d, r)),
                                           up=rng.standard_normal((r, k)),
                                           alpha=float(rng.uniform(0.1, 2.0))))
            inputs.append(rng.standard_normal((tokens, d)))
            ups.append(rng.standard_normal((tokens, k)))
        w_base = rng.standard_normal((d, k))
        packed = pack_adapters(adapters, inputs)
        outs = packed_forward(packed, w_base)
        d_downs, d_ups, d_inputs = packed_backward(packed, w_base, ups)
        for i, (adapter, x, dy) in enumerate(zip(adapters, inputs, ups)):
            ref = adapter_forward(adapter, x, w_base)
            worst_fwd = max(worst_fwd, float(np.max(np.abs(outs[i] - ref))))
            rd, ru, rx = adapter_backward(adapter, x, w_base, dy)
            worst_bwd = max(worst_bwd,
                            float(np.max(np.abs(d_downs[i] - rd))),
                            float(np.max(np.abs(d_ups[i] - ru))),
                            float(np.max(np.abs(d_inputs[i] - rx))))
    seq_ok = worst_fwd < 1e-12 and worst_bwd < 1e-10
    ok &= seq_ok
    lines.append(f"packed-vs-sequential  {'PASS' if seq_ok else 'FAIL'}   "
                 f"fwd {worst_fwd:.3e}  bwd {worst_bwd:.3e}  ({trials} packs)")

    case_names = {
        "up_weight": "case 1: up-projection weight grad",
        "up_input": "case 2: up-projection input grad",
        "down_weight": "case 3: down-projection weight grad",
        "down_input": "case 4: down-projection input grad",
    }
    worst = {key: 0.0 for key in case_names}
    checks = max(8, trials // 8)
    for i in range(checks):
        n = int(rng.integers(1, 5))
        d = int(rng.integers(2, 9))
        k = int(rng.integers(2, 9))
        adapters, inputs = [], []
        for _ in range(n):
            r = int(rng.integers(1, 5))
            tokens = int(rng.integers(1, 5))
            adapters.append(AdapterWeights(down=rng.standard_normal((d, r)),
                                           up=rng.standard_normal((r, k)),
                                           alpha=float(rng.uniform(0.1, 2.0))))
            inputs.append(rng.standard_normal((tokens, d)))
        packed = pack_adapters(adapters, inputs)
        report = grad_check(packed, rng.standard_normal((d, k)), seed=seed + i)
        for key in worst:
            worst[key] = max(worst[key], report.case_errors[key])
    for key, label in case_names.items():
        case_ok = worst[key] < 1e-5
        ok &= case_ok
        lines.append(f"{label:38s}{'PASS' if case_ok else 'FAIL'}   "
                     f"max rel err {worst[key]:.3e}")
    return ok, lines


def cmd_verify_kernels(args) -> int:
    ok, lines = _verify_kernels(args.seed, args.trials)
    for line in lines:
        print(line)
    if not ok:
        return _fail("verification", EXIT_VERIFY, "packed-adapter math check failed")
    return EXIT_OK


def cmd_report(args) -> int:
    """Render a run report for humans."""
    data = json.loads(Path(args.report).read_text())
    mk = data["makespan_s"]
    print(f"workload    {data['workload_digest'][:16]}  "
          f"(tool {data['tool']['name']} {data['tool']['version']})")
    qs = data["queue_summary"]
    print(f"queue       {qs['configs']} configs in {qs['jobs']} jobs over {qs['batches']} batches")
    print(f"makespan    planned {mk['planned']:.6g} s | "
          f"min-GPU {mk['min_gpu']:.6g} s | max-GPU {mk['max_gpu']:.6g} s")
    print(f"speedup     {data['speedup']['vs_min_gpu']:.2f}x vs min-GPU, "
          f"{data['speedup']['vs_max_gpu']:.2f}x vs max-GPU")
    print(f"utilization {data['utilization']:.1%}")
    pre = data["tail_bound_preconditions"]
    print(f"tail bound  {data['ar_bound']:.4f} "
          f"(full pre-tail utilization: {pre['full_pre_tail_utilization']}, "
          f"monotone degrees: {pre['monotone_degrees']})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lorasweep",
        description="Plan, simulate and verify packed LoRA hyperparameter sweeps.")
    parser.add_argument("--version", action="version", version=f"lorasweep {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    plan = sub.add_parser("plan", help="pack configurations into a job queue")
    plan.add_argument("--workload", required=True, help="workload JSON file")
    plan.add_argument("--profiles", help="profile CSV (default: embedded records)")
    plan.add_argument("--out", required=True, help="queue JSON output path")
    plan.add_argument("--load-factor", type=float, help="override the pool load factor")
    plan.set_defaults(func=cmd_plan)

    sim = sub.add_parser("simulate", help="execute a queue and compare baselines")
    sim.add_argument("--queue", required=True, help="queue JSON file")
    sim.add_argument("--workload", required=True, help="workload JSON file")
    sim.add_argument("--profiles", help="profile CSV (default: embedded records)")
    sim.add_argument("--out", help="report JSON output path (default: stdout)")
    sim.add_argument("--load-factor", type=float, help="override the pool load factor")
    sim.set_defaults(func=cmd_simulate)

    cal = sub.add_parser("calibrate", help="fit the iteration-time model")
    cal.add_argument("--profiles", required=True, help="profile CSV file")
    cal.add_argument("--out", help="write fitted coefficients as JSON")
    cal.set_defaults(func=cmd_calibrate)

    verify = sub.add_parser("verify-kernels",
                            help="check packed forward/backward math numerically")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--trials", type=int, default=64)
    verify.set_defaults(func=cmd_verify_kernels)

    rep = sub.add_parser("report", help="render a run report")
    rep.add_argument("--report", required=True, help="report JSON file")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("LORASWEEP_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except WorkloadSyntaxError as exc:
        return _fail("syntax", EXIT_SYNTAX, str(exc))
    except WorkloadValidationError as exc:
        return _fail("validation", EXIT_VALIDATION, str(exc))
    except CalibrationError as exc:
        return _fail("calibration", EXIT_CALIBRATION, str(exc))
    except (NoFeasiblePacking, UnschedulableError, SimulationError) as exc:
        return _fail("infeasible", EXIT_INFEASIBLE, str(exc))
    except DigestMismatch as exc:
        return _fail("digest", EXIT_DIGEST, str(exc))
    except FileNotFoundError as exc:
        return _fail("io", EXIT_INTERNAL, str(exc))


if __name__ == "__main__":
    sys.exit(main())
