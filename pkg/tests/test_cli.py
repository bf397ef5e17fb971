import json

import pytest

from lorasweep.cli import (
    EXIT_CALIBRATION,
    EXIT_DIGEST,
    EXIT_INFEASIBLE,
    EXIT_OK,
    EXIT_SYNTAX,
    EXIT_VALIDATION,
    EXIT_VERIFY,
    main,
)
from lorasweep.costmodel import adapter_load


def affine_profiles(degrees, base=1.0, marginal=1e-5):
    rows = ["degree,ranks,batch_sizes,seq_len,iter_time_s"]
    for d in degrees:
        for ranks, batches in (((8,), (1,)), ((16, 8), (2, 1)), ((32,), (4,))):
            load = sum(adapter_load(r, b, 64) for r, b in zip(ranks, batches))
            t = base / d + marginal * load
            rows.append(f"{d},{'+'.join(map(str, ranks))},"
                        f"{'+'.join(map(str, batches))},64,{t!r}")
    return "\n".join(rows) + "\n"


def workload_doc(n_configs=6, gpu_count=4, mem_per_gpu=2 * 10**9):
    return {
        "model": {
            "name": "toy",
            "n_layers": 2,
            "target_modules": [{"name": "q", "h_in": 1024, "h_out": 1024}],
            "base_param_count": 100_000_000,
            "c_prec": 2,
        },
        "pool": {"gpu_count": gpu_count, "mem_per_gpu": mem_per_gpu,
                 "load_factor": 1.0},
        "defaults": {"seq_len": 64, "train_steps": 20},
        "configs": [
            {"id": f"cfg-{i:02d}", "rank": 8 * (1 + i % 3), "alpha": 16.0,
             "batch_size": 1 + i % 2, "learning_rate": 1e-4}
            for i in range(n_configs)
        ],
    }


@pytest.fixture
def workspace(tmp_path):
    workload = tmp_path / "workload.json"
    profiles = tmp_path / "profiles.csv"
    workload.write_text(json.dumps(workload_doc()))
    profiles.write_text(affine_profiles([1, 2, 4]))
    return tmp_path, workload, profiles


class TestPlan:
    def test_success(self, workspace):
        tmp, workload, profiles = workspace
        out = tmp / "queue.json"
        code = main(["plan", "--workload", str(workload), "--profiles", str(profiles),
                     "--out", str(out)])
        assert code == EXIT_OK
        queue = json.loads(out.read_text())
        assert queue["batches"]
        planned = [c for b in queue["batches"] for j in b["jobs"] for c in j["configs"]]
        assert sorted(planned) == sorted(f"cfg-{i:02d}" for i in range(6))

    def test_idempotent(self, workspace):
        tmp, workload, profiles = workspace
        a, b = tmp / "a.json", tmp / "b.json"
        main(["plan", "--workload", str(workload), "--profiles", str(profiles), "--out", str(a)])
        main(["plan", "--workload", str(workload), "--profiles", str(profiles), "--out", str(b)])
        assert a.read_text() == b.read_text()

    def test_missing_degree_calibration(self, workspace, capsys):
        tmp, workload, profiles = workspace
        profiles.write_text(affine_profiles([1, 2]))  # degree 4 missing
        code = main(["plan", "--workload", str(workload), "--profiles", str(profiles),
                     "--out", str(tmp / "q.json")])
        assert code == EXIT_CALIBRATION
        assert "degree 4" in capsys.readouterr().err

    def test_unschedulable_config(self, workspace, capsys):
        tmp, workload, profiles = workspace
        doc = workload_doc(mem_per_gpu=10**6)  # nothing fits
        workload.write_text(json.dumps(doc))
        code = main(["plan", "--workload", str(workload), "--profiles", str(profiles),
                     "--out", str(tmp / "q.json")])
        assert code == EXIT_INFEASIBLE
        assert "cfg-00" in capsys.readouterr().err

    def test_syntax_error(self, workspace, capsys):
        tmp, workload, profiles = workspace
        workload.write_text("{not json")
        code = main(["plan", "--workload", str(workload), "--profiles", str(profiles),
                     "--out", str(tmp / "q.json")])
        assert code == EXIT_SYNTAX
        assert "error[syntax]" in capsys.readouterr().err

    def test_validation_error(self, workspace, capsys):
        tmp, workload, profiles = workspace
        doc = workload_doc()
        doc["configs"][1]["id"] = doc["configs"][0]["id"]
        workload.write_text(json.dumps(doc))
        code = main(["plan", "--workload", str(workload), "--profiles", str(profiles),
                     "--out", str(tmp / "q.json")])
        assert code == EXIT_VALIDATION
        assert "duplicate id" in capsys.readouterr().err


class TestSimulate:
    def plan(self, workspace):
        tmp, workload, profiles = workspace
        queue = tmp / "queue.json"
        assert main(["plan", "--workload", str(workload), "--profiles", str(profiles),
                     "--out", str(queue)]) == EXIT_OK
        return queue

    def test_report_structure(self, workspace):
        tmp, workload, profiles = workspace
        queue = self.plan(workspace)
        out = tmp / "report.json"
        code = main(["simulate", "--queue", str(queue), "--workload", str(workload),
                     "--profiles", str(profiles), "--out", str(out)])
        assert code == EXIT_OK
        report = json.loads(out.read_text())
        mk = report["makespan_s"]
        assert set(mk) == {"planned", "min_gpu", "max_gpu"}
        assert report["speedup"]["vs_min_gpu"] == pytest.approx(
            mk["min_gpu"] / mk["planned"])
        assert report["speedup"]["vs_max_gpu"] == pytest.approx(
            mk["max_gpu"] / mk["planned"])
        assert report["ar_bound"] >= 1.0
        assert mk["planned"] <= mk["min_gpu"] + 1e-9

    def test_idempotent(self, workspace):
        tmp, workload, profiles = workspace
        queue = self.plan(workspace)
        a, b = tmp / "r1.json", tmp / "r2.json"
        for path in (a, b):
            main(["simulate", "--queue", str(queue), "--workload", str(workload),
                  "--profiles", str(profiles), "--out", str(path)])
        assert a.read_text() == b.read_text()

    def test_digest_mismatch(self, workspace, capsys):
        tmp, workload, profiles = workspace
        queue = self.plan(workspace)
        doc = workload_doc()
        doc["configs"][0]["rank"] = 24  # different workload, same config ids
        workload.write_text(json.dumps(doc))
        code = main(["simulate", "--queue", str(queue), "--workload", str(workload),
                     "--profiles", str(profiles)])
        assert code == EXIT_DIGEST
        assert "error[digest]" in capsys.readouterr().err

    def test_report_rendering(self, workspace, capsys):
        tmp, workload, profiles = workspace
        queue = self.plan(workspace)
        report = tmp / "report.json"
        main(["simulate", "--queue", str(queue), "--workload", str(workload),
              "--profiles", str(profiles), "--out", str(report)])
        capsys.readouterr()
        assert main(["report", "--report", str(report)]) == EXIT_OK
        text = capsys.readouterr().out
        assert "makespan" in text and "speedup" in text


class TestOtherCommands:
    def test_calibrate(self, workspace, capsys):
        tmp, workload, profiles = workspace
        out = tmp / "tm.json"
        code = main(["calibrate", "--profiles", str(profiles), "--out", str(out)])
        assert code == EXIT_OK
        doc = json.loads(out.read_text())
        assert set(doc["degrees"]) == {"1", "2", "4"}
        text = capsys.readouterr().out
        assert "degree 1" in text

    def test_verify_kernels(self, capsys):
        code = main(["verify-kernels", "--seed", "3", "--trials", "16"])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert out.count("PASS") == 5
        assert "case 4" in out

    def test_exit_codes_partition(self):
        codes = [EXIT_OK, EXIT_SYNTAX, EXIT_VALIDATION, EXIT_CALIBRATION,
                 EXIT_INFEASIBLE, EXIT_DIGEST, EXIT_VERIFY]
        assert len(set(codes)) == len(codes)
