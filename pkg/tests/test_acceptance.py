"""Acceptance suite.

Each test checks one release criterion at its stated tolerance and prints a
single pass/fail line (written past pytest's capture so the lines always
show up in the run log).
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

from lorasweep import (
    AdapterWeights,
    GpuPool,
    MemoryContext,
    ModelSpec,
    NoFeasiblePacking,
    PlannerStats,
    TargetModule,
    TimeModel,
    calibrate_time_model,
    parse_workload,
    read_profiles,
    adapter_backward,
    adapter_forward,
    ar_bound,
    brute_force_makespan,
    brute_force_subproblem,
    check_feasibility,
    dtm,
    grad_check,
    job_memory,
    max_gpu_queue,
    min_gpu_queue,
    pack_adapters,
    packed_backward,
    packed_forward,
    plan_jobs,
    simulate,
    solve_subproblem,
)
from lorasweep.simulator import ScheduleTrace, TraceJob

from support import (
    make_config,
    multi_batch_instance,
    pool_for,
    random_planner_instance,
    random_subproblem_instance,
    sweep_shaped_instance,
    tiny_model,
)


@pytest.fixture
def announce(capsys):
    """Print one pass/fail line per criterion past pytest's capture."""

    def _announce(ok: bool, name: str, detail: str):
        status = "PASS" if ok else "FAIL"
        with capsys.disabled():
            sys.stdout.write(f"\nACCEPTANCE {status} {name}: {detail}\n")
            sys.stdout.flush()

    return _announce


@pytest.fixture(scope="module")
def small_suite():
    """200 desk-scale instances planned, simulated, checked and compared to
    the exact makespan oracle."""
    rng = np.random.default_rng(2024)
    records = []
    start = time.monotonic()
    for _ in range(200):
        gpus, configs, tm, mem, pool = random_planner_instance(rng)
        queue = plan_jobs(gpus, configs, tm, mem)
        trace = simulate(queue, pool, tm, configs)
        violations = check_feasibility(trace, queue, pool)
        tail = ar_bound(trace)
        optimum, _ = brute_force_makespan(configs, gpus, tm, mem)
        work = sum(j.degree * j.duration_s for j in trace.jobs)
        records.append({
            "gpus": gpus,
            "makespan": trace.makespan,
            "optimum": optimum,
            "tail": tail,
            "work": work,
            "violations": violations,
        })
    return records, time.monotonic() - start


@pytest.fixture(scope="module")
def medium_suite():
    """24 multi-batch instances (the random tail-bound suite)."""
    rng = np.random.default_rng(777)
    records = []
    for _ in range(24):
        gpus, configs, tm, mem, pool = multi_batch_instance(rng)
        queue = plan_jobs(gpus, configs, tm, mem)
        trace = simulate(queue, pool, tm, configs)
        records.append({
            "tail": ar_bound(trace),
            "violations": check_feasibility(trace, queue, pool),
        })
    return records


@pytest.fixture(scope="module")
def sweep_suite():
    """Full-sweep-shaped instances: 120 configurations on 8 GPUs; two
    synthetic draws plus the shipped sample workload."""
    rng = np.random.default_rng(11)
    runs = []
    for _ in range(2):
        gpus, configs, tm, mem, pool = sweep_shaped_instance(rng)
        runs.append((gpus, configs, tm, mem, pool))

    data = Path(__file__).parent.parent / "demos" / "data"
    spec = parse_workload((data / "sample_workload.json").read_text())
    tm = calibrate_time_model(read_profiles((data / "sample_profiles.csv").read_text()))
    mem = MemoryContext(spec.model, spec.pool, spec.configs)
    runs.append((spec.pool.gpu_count, spec.configs, tm, mem, spec.pool))

    records = []
    for gpus, configs, tm, mem, pool in runs:
        queue = plan_jobs(gpus, configs, tm, mem)
        trace = simulate(queue, pool, tm, configs)
        records.append({
            "tail": ar_bound(trace),
            "violations": check_feasibility(trace, queue, pool),
        })
    return records


@pytest.fixture(scope="module")
def ordering_runs():
    """Planner and both baselines on a workload whose per-degree efficiency
    strictly decreases (no speedup from wider jobs)."""
    rng = np.random.default_rng(8)
    model = tiny_model()
    configs = [make_config(f"c{i:02d}", rank=int(rng.choice([8, 16, 32])),
                           seq_len=16, train_steps=50) for i in range(24)]
    pool = pool_for(model, configs, adapters_per_gpu=4.0, gpu_count=8)
    tm = TimeModel(coeffs={d: (1.0, 2e-5) for d in (1, 2, 4, 8)})
    mem = MemoryContext(model, pool, configs)
    runs = {}
    for name, queue in (
        ("planned", plan_jobs(8, configs, tm, mem)),
        ("min_gpu", min_gpu_queue(configs, 8, tm, mem)),
        ("max_gpu", max_gpu_queue(configs, 8, tm, mem)),
    ):
        trace = simulate(queue, pool, tm, configs)
        runs[name] = {
            "makespan": trace.makespan,
            "violations": check_feasibility(trace, queue, pool),
        }
    return runs


def test_criterion_1_packed_equals_sequential(announce):
    start = time.monotonic()
    rng = np.random.default_rng(101)
    worst_fwd = worst_bwd = 0.0
    for _ in range(500):
        n = int(rng.integers(1, 33))
        d = int(rng.integers(2, 33))
        k = int(rng.integers(2, 33))
        adapters, inputs, ups = [], [], []
        for _ in range(n):
            r = int(rng.integers(1, 17))
            tokens = int(rng.integers(1, 9))
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
            worst_fwd = max(worst_fwd, float(np.max(np.abs(
                outs[i] - adapter_forward(adapter, x, w_base)))))
            rd, ru, rx = adapter_backward(adapter, x, w_base, dy)
            worst_bwd = max(worst_bwd,
                            float(np.max(np.abs(d_downs[i] - rd))),
                            float(np.max(np.abs(d_ups[i] - ru))),
                            float(np.max(np.abs(d_inputs[i] - rx))))
    elapsed = time.monotonic() - start
    ok = worst_fwd < 1e-12 and worst_bwd < 1e-10 and elapsed < 30
    announce(ok, "criterion 1 packed-equals-sequential",
             f"500 packs, max fwd err {worst_fwd:.2e} < 1e-12, "
             f"max bwd err {worst_bwd:.2e} < 1e-10, {elapsed:.1f}s < 30s")
    assert worst_fwd < 1e-12
    assert worst_bwd < 1e-10
    assert elapsed < 30


def test_criterion_2_gradient_correctness(announce):
    start = time.monotonic()
    rng = np.random.default_rng(202)
    worst = {}
    for i in range(100):
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
        report = grad_check(packed, rng.standard_normal((d, k)), seed=i)
        for case, err in report.case_errors.items():
            worst[case] = max(worst.get(case, 0.0), err)
    elapsed = time.monotonic() - start
    max_err = max(worst.values())
    ok = max_err < 1e-5 and elapsed < 60
    announce(ok, "criterion 2 gradient correctness",
             f"100 shapes, four cases, max rel err {max_err:.2e} < 1e-5, "
             f"{elapsed:.1f}s < 60s")
    assert len(worst) == 4
    assert max_err < 1e-5
    assert elapsed < 60


def test_criterion_3_subproblem_optimality(announce):
    start = time.monotonic()
    rng = np.random.default_rng(303)
    solved = infeasible = 0
    for _ in range(1000):
        degree, configs, tm, mem = random_subproblem_instance(rng, max_configs=12)
        try:
            fast = solve_subproblem(degree, configs, tm, mem)
        except NoFeasiblePacking:
            with pytest.raises(NoFeasiblePacking):
                brute_force_subproblem(degree, configs, tm, mem)
            infeasible += 1
            continue
        slow = brute_force_subproblem(degree, configs, tm, mem)
        assert abs(fast.throughput - slow.throughput) <= 1e-9 * max(
            1.0, abs(slow.throughput)), (fast, slow)
        solved += 1
    elapsed = time.monotonic() - start
    ok = elapsed < 60
    announce(ok, "criterion 3 subproblem optimality",
             f"{solved} solved + {infeasible} infeasible instances match the "
             f"exhaustive oracle, {elapsed:.1f}s < 60s")
    assert solved >= 700
    assert elapsed < 60


def test_criterion_4_planner_quality(announce, small_suite):
    records, elapsed = small_suite
    pre_failures = 0
    for record in records:
        assert record["makespan"] >= record["optimum"] - 1e-9
        tail = record["tail"]
        work_premise = record["optimum"] * record["gpus"] >= record["work"] - 1e-9
        if tail.full_pre_tail_utilization and tail.monotone_degrees and work_premise:
            assert record["makespan"] <= tail.bound * record["optimum"] + 1e-9
        else:
            pre_failures += 1
    rate = pre_failures / len(records)
    ok = rate < 0.30 and elapsed < 600
    announce(ok, "criterion 4 planner quality",
             f"200 instances: planner >= optimum, tail bound holds under the "
             f"proof's preconditions, precondition failures {rate:.0%} < 30%, "
             f"{elapsed:.0f}s < 600s")
    assert rate < 0.30
    assert elapsed < 600


def test_criterion_5_dtm_call_count(announce):
    model = tiny_model()
    configs = [make_config(f"c{i:02d}", rank=8, seq_len=1) for i in range(40)]
    pool = pool_for(model, configs, adapters_per_gpu=1.2, gpu_count=8)
    tm = TimeModel(coeffs={d: (1.0 * d ** -0.3, 1e-4) for d in (1, 2, 4, 8)})
    mem = MemoryContext(model, pool, configs)
    stats = PlannerStats()
    dtm(8, configs, tm, mem, stats=stats)
    ok = stats.subproblem_calls == 127
    announce(ok, "criterion 5 allocation-enumeration call count",
             f"8 GPUs, non-exhausting candidate set: {stats.subproblem_calls} "
             f"packing-solver calls (expected 127)")
    assert stats.subproblem_calls == 127


def test_criterion_6_memory_capacity_reproduction(announce):
    # Calibrated so one adapter at batch 1, sequence 1024 costs 2.2e9 bytes
    # on top of 16.0e9 bytes of base weights: totals 18.2e9 for one adapter,
    # 20.4e9 for two.
    model = ModelSpec(name="cal", n_layers=1,
                      target_modules=(TargetModule("q", 1_374_872, 1_374_872),),
                      base_param_count=8_000_000_000, c_prec=2)
    cfg = make_config("a", rank=100, batch_size=1, seq_len=1024)
    pool = GpuPool(gpu_count=1, mem_per_gpu=40_000_000_000, load_factor=1.0)
    one, _ = job_memory([cfg], 1, model, pool)
    two, _ = job_memory([cfg, cfg], 1, model, pool)
    _, ok10 = job_memory([cfg] * 10, 1, model, pool)
    _, ok11 = job_memory([cfg] * 11, 1, model, pool)
    ok = one == 18_200_000_000 and two == 20_400_000_000 and ok10 and not ok11
    announce(ok, "criterion 6 memory-capacity reproduction",
             f"one adapter {one/1e9:.1f} GB, two {two/1e9:.1f} GB on a 40 GB "
             f"device: 10 adapters fit, 11 rejected")
    assert one == 18_200_000_000
    assert two == 20_400_000_000
    assert ok10 and not ok11


def test_criterion_7_tail_bound_sanity(announce, medium_suite, sweep_suite):
    def forged(jobs, gpu_count):
        makespan = max(j.start_s + j.duration_s for j in jobs)
        return ScheduleTrace(jobs=tuple(jobs), makespan=makespan,
                             gpu_count=gpu_count, events=())

    def job(jid, start, duration, degree):
        return TraceJob(job_id=jid, configs=(jid,), degree=degree, start_s=start,
                        duration_s=duration, devices=tuple(range(degree)),
                        predicted_s=duration)

    full_width = ar_bound(forged([job("a", 0.0, 5.0, 4)], 4)).bound
    zero_tail = ar_bound(forged([job("a", 0.0, 5.0, 4), job("b", 5.0, 0.0, 1)], 4)).bound
    narrow_tail = ar_bound(forged([job("a", 0.0, 5.0, 4), job("b", 5.0, 1.0, 1)], 4)).bound

    random_bounds = [r["tail"].bound for r in medium_suite]
    sweep_bounds = [r["tail"].bound for r in sweep_suite]
    ok = (full_width == 1.0 and zero_tail == 1.0 and narrow_tail > 1.0
          and all(1.0 <= b <= 1.5 for b in random_bounds)
          and all(1.0 <= b <= 1.2 for b in sweep_bounds))
    announce(ok, "criterion 7 tail-bound sanity",
             f"exact 1 at full width / zero tail; random suite bounds in "
             f"[{min(random_bounds):.3f}, {max(random_bounds):.3f}] within [1, 1.5]; "
             f"sweep-shaped bounds in [{min(sweep_bounds):.3f}, "
             f"{max(sweep_bounds):.3f}] within [1.0, 1.2]")
    assert full_width == 1.0
    assert zero_tail == 1.0
    assert narrow_tail > 1.0
    assert all(1.0 <= b <= 1.5 for b in random_bounds)
    assert all(1.0 <= b <= 1.2 for b in sweep_bounds)


def test_criterion_8_baseline_ordering(announce, ordering_runs):
    planned = ordering_runs["planned"]["makespan"]
    min_gpu = ordering_runs["min_gpu"]["makespan"]
    max_gpu = ordering_runs["max_gpu"]["makespan"]
    ok = max_gpu > min_gpu > planned
    announce(ok, "criterion 8 baseline ordering",
             f"max-GPU {max_gpu:.1f}s > min-GPU {min_gpu:.1f}s > planned "
             f"{planned:.1f}s on a decreasing-efficiency workload")
    assert max_gpu > min_gpu
    assert min_gpu > planned


def test_criterion_9_feasibility_closure(announce, small_suite, medium_suite,
                                         sweep_suite, ordering_runs):
    records, _ = small_suite
    all_violations = []
    for record in records + medium_suite + sweep_suite:
        all_violations.extend(record["violations"])
    for run in ordering_runs.values():
        all_violations.extend(run["violations"])
    total = len(records) + len(medium_suite) + len(sweep_suite) + len(ordering_runs)
    ok = not all_violations
    announce(ok, "criterion 9 feasibility closure",
             f"{total} simulated traces re-checked against the scheduling "
             f"constraints with {len(all_violations)} violations")
    assert all_violations == []
