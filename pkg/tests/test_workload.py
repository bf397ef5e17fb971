import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lorasweep import (
    LoraConfig,
    ModelSpec,
    TargetModule,
    WorkloadSyntaxError,
    WorkloadValidationError,
    enumerate_grid,
    parse_workload,
    serialize_workload,
    validate_config,
    workload_digest,
)
from lorasweep.workload import ShardingSpec, validate_sharding

from support import make_config


def minimal_document(**overrides):
    doc = {
        "model": {
            "name": "toy",
            "n_layers": 2,
            "target_modules": [{"name": "q", "h_in": 256, "h_out": 256}],
            "base_param_count": 1000,
            "c_prec": 2,
        },
        "pool": {"gpu_count": 1, "mem_per_gpu": 10**9, "load_factor": 1.0},
        "configs": [
            {"id": "a", "rank": 8, "alpha": 16.0, "batch_size": 1,
             "learning_rate": 1e-4, "seq_len": 64, "train_steps": 10},
        ],
    }
    doc.update(overrides)
    return doc


class TestParse:
    def test_minimal_document(self):
        spec = parse_workload(json.dumps(minimal_document()))
        assert len(spec.configs) == 1
        assert spec.configs[0].id == "a"
        assert spec.pool.gpu_count == 1

    def test_duplicate_ids_rejected(self):
        doc = minimal_document()
        doc["configs"].append(dict(doc["configs"][0]))
        with pytest.raises(WorkloadValidationError, match="duplicate id"):
            parse_workload(json.dumps(doc))

    def test_rank_exceeding_projection_rejected(self):
        doc = minimal_document()
        doc["model"]["target_modules"] = [{"name": "v", "h_in": 256, "h_out": 64}]
        doc["configs"][0]["rank"] = 128
        with pytest.raises(WorkloadValidationError, match="exceeds projection dimension"):
            parse_workload(json.dumps(doc))

    def test_syntax_error_reports_position(self):
        with pytest.raises(WorkloadSyntaxError, match=r"line \d+, column \d+"):
            parse_workload('{"model": }')

    def test_missing_field_named(self):
        doc = minimal_document()
        del doc["pool"]["gpu_count"]
        with pytest.raises(WorkloadValidationError, match="gpu_count"):
            parse_workload(json.dumps(doc))

    def test_defaults_fill_missing_config_fields(self):
        doc = minimal_document()
        doc["defaults"] = {"seq_len": 128, "train_steps": 5}
        doc["configs"] = [{"rank": 4, "alpha": 8.0, "batch_size": 2,
                           "learning_rate": 2e-4}]
        spec = parse_workload(json.dumps(doc))
        cfg = spec.configs[0]
        assert (cfg.seq_len, cfg.train_steps) == (128, 5)
        assert cfg.id.startswith("cfg-")

    def test_profiles_parsed(self):
        doc = minimal_document()
        doc["profiles"] = [{"degree": 1, "ranks": [8, 16], "batch_sizes": [1, 1],
                            "seq_len": 64, "iter_time_s": 0.5}]
        spec = parse_workload(json.dumps(doc))
        assert spec.profiles[0].packed_ranks == (8, 16)

    def test_round_trip_identity(self):
        doc = minimal_document()
        doc["profiles"] = [{"degree": 2, "ranks": [8], "batch_sizes": [4],
                            "seq_len": 64, "iter_time_s": 1.25}]
        spec = parse_workload(json.dumps(doc))
        again = parse_workload(serialize_workload(spec))
        assert again == spec
        assert workload_digest(again) == workload_digest(spec)


class TestValidateConfig:
    def setup_method(self):
        self.model = ModelSpec(
            name="m", n_layers=4,
            target_modules=(TargetModule("q", 2048, 2048),),
            base_param_count=0, c_prec=2)

    def test_small_rank_ok(self):
        assert validate_config(make_config("x", rank=8), self.model) == []

    def test_zero_batch_size(self):
        violations = validate_config(make_config("x", batch_size=0), self.model)
        assert any("batch_size" in v for v in violations)

    def test_rank_above_min_dim(self):
        violations = validate_config(make_config("x", rank=4096), self.model)
        assert any("exceeds projection dimension" in v for v in violations)

    def test_empty_iff_all_predicates_hold(self):
        # Cross-check against direct predicate evaluation.
        cases = [
            make_config("x", rank=1),
            make_config("x", rank=0),
            make_config("x", batch_size=0, seq_len=0),
            make_config("x", train_steps=0),
            LoraConfig("x", 8, -1.0, 1, 1e-4, 64, 1),
        ]
        for cfg in cases:
            predicates = (
                cfg.rank >= 1 and cfg.batch_size >= 1 and cfg.seq_len >= 1
                and cfg.train_steps >= 1 and cfg.alpha > 0 and cfg.learning_rate > 0
                and cfg.rank <= self.model.min_projection_dim)
            assert (validate_config(cfg, self.model) == []) == predicates


class TestSharding:
    def test_mixing_rejected(self):
        bad = ShardingSpec(d_tp=2, d_fsdp=2, zero_level=1)
        assert any("cannot be combined" in v for v in validate_sharding(bad))

    def test_fsdp_without_zero_rejected(self):
        assert validate_sharding(ShardingSpec(d_fsdp=2)) != []

    def test_plain_tp_ok(self):
        assert validate_sharding(ShardingSpec(d_tp=4)) == []


class TestGrid:
    def template(self):
        return make_config("template", seq_len=1024, train_steps=100)

    def test_product_count(self):
        grid = enumerate_grid([1e-4, 2e-4], [1, 2, 4], [8, 16], [8.0, 16.0],
                              self.template())
        assert len(grid) == 24

    def test_identity_case(self):
        grid = enumerate_grid([1e-4], [2], [8], [16.0], self.template())
        assert len(grid) == 1
        cfg = grid[0]
        assert (cfg.rank, cfg.alpha, cfg.batch_size, cfg.learning_rate) == (8, 16.0, 2, 1e-4)
        assert (cfg.seq_len, cfg.train_steps) == (1024, 100)

    def test_sweep_of_120_points(self):
        grid = enumerate_grid([2e-5, 5e-5, 1e-4, 2e-4, 4e-4], [1, 2, 4, 8],
                              [8, 32, 128], [16.0, 64.0], self.template())
        assert len(grid) == 120
        assert len({c.id for c in grid}) == 120

    def test_empty_range_rejected(self):
        with pytest.raises(WorkloadValidationError, match="empty range list"):
            enumerate_grid([], [1], [8], [16.0], self.template())

    @given(
        lrs=st.lists(st.floats(1e-6, 1e-2), min_size=1, max_size=4, unique=True),
        bss=st.lists(st.integers(1, 8), min_size=1, max_size=4, unique=True),
        ranks=st.lists(st.integers(1, 64), min_size=1, max_size=4, unique=True),
        alphas=st.lists(st.floats(0.25, 64.0), min_size=1, max_size=4, unique=True),
    )
    @settings(max_examples=50, deadline=None)
    def test_count_is_product_of_lengths(self, lrs, bss, ranks, alphas):
        grid = enumerate_grid(lrs, bss, ranks, alphas, self.template())
        assert len(grid) == len(lrs) * len(bss) * len(ranks) * len(alphas)

    def test_ids_deterministic(self):
        a = enumerate_grid([1e-4], [1], [8], [16.0], self.template())
        b = enumerate_grid([1e-4], [1], [8], [16.0], self.template())
        assert a == b
