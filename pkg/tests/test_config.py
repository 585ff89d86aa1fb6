"""Config parsing, validation paths, hashing, and materialization."""

import json

import pytest

from pqnet.config import (Materials, ParseError, RunConfig, ValidationError,
                          build_partition, build_spec, config_hash,
                          load_config, materialize, parse_config)
from pqnet.models import HardwareParams


def cfg(**overrides) -> RunConfig:
    return parse_config(overrides)


class TestParsing:
    def test_empty_document_is_all_defaults(self):
        config = parse_config({})
        assert config == RunConfig()
        assert config.hardware == HardwareParams()
        assert config.end_time_ps == 100_000_000_000
        assert config.workers == 1
        assert config.features.batching and config.features.offloading
        assert not config.features.purification

    def test_round_trips_through_as_dict(self):
        config = cfg(topology={"kind": "caveman", "caves": 4, "clique": 5},
                     flows={"kind": "random", "seed": 9},
                     hardware={"memory_efficiency": 0.5},
                     workers=4, lookahead="half_classical",
                     features={"duplication_factor": 3},
                     partition={"method": "anneal", "energy": "P3"})
        assert parse_config(config.as_dict()) == config

    @pytest.mark.parametrize("document, path", [
        ({"topo": {}}, "topo"),
        ({"topology": {"n": 4}}, "topology.n"),
        ({"flows": {"demand": 3}}, "flows.demand"),
        ({"hardware": {"fidelity": 0.9}}, "hardware.fidelity"),
        ({"partition": {"style": "x"}}, "partition.style"),
        ({"features": {"offload": False}}, "features.offload"),
    ])
    def test_unknown_fields_are_rejected_with_their_path(self, document, path):
        with pytest.raises(ValidationError) as err:
            parse_config(document)
        assert err.value.path == path

    @pytest.mark.parametrize("document, path", [
        ({"seed": "abc"}, "seed"),
        ({"workers": True}, "workers"),
        ({"end_time_ms": "fast"}, "end_time_ms"),
        ({"topology": {"kind": "ring"}}, "topology.kind"),
        ({"topology": {"size": 0}}, "topology.size"),
        ({"lookahead": "optimistic"}, "lookahead"),
        ({"transport": "mpi"}, "transport"),
        ({"server": 99}, "server"),
        ({"features": {"duplication_factor": 9}}, "features.duplication_factor"),
        ({"features": {"batching": 1}}, "features.batching"),
        ({"partition": {"iterations": -1}}, "partition.iterations"),
        ({"hardware": {"memory_efficiency": 1.5}}, "hardware"),
        ({"hardware": {"resolution_ps": 1.5}}, "hardware.resolution_ps"),
        ({"end_time_ms": 0}, "end_time_ms"),
    ])
    def test_bad_values_name_the_offending_field(self, document, path):
        with pytest.raises(ValidationError) as err:
            parse_config(document)
        assert err.value.path == path

    def test_explicit_partition_needs_a_map(self):
        with pytest.raises(ValidationError, match="required"):
            cfg(partition={"method": "explicit"})
        with pytest.raises(ValidationError, match="explicit"):
            cfg(partition={"method": "blocks", "map": {"r0": 0}})
        with pytest.raises(ValidationError, match="router -> worker"):
            cfg(partition={"method": "explicit", "map": {"r0": "zero"}})
        config = cfg(workers=2,
                     partition={"method": "explicit",
                                "map": {"r0": 0, "r1": 1}})
        assert config.partition.map == {"r0": 0, "r1": 1}

    def test_load_config_reports_json_errors(self, tmp_path):
        bad = tmp_path / "run.json"
        bad.write_text("{not json")
        with pytest.raises(ParseError, match="run.json"):
            load_config(str(bad))
        good = tmp_path / "ok.json"
        good.write_text(json.dumps({"workers": 2}))
        assert load_config(str(good)).workers == 2


class TestHashing:
    def test_engine_knobs_do_not_change_the_hash(self):
        base = config_hash(cfg())
        assert config_hash(cfg(workers=8)) == base
        assert config_hash(cfg(lookahead="half_classical")) == base
        assert config_hash(cfg(transport="processes")) == base
        assert config_hash(cfg(partition={"method": "anneal"})) == base
        assert config_hash(cfg(features={"batching": False,
                                         "offloading": False,
                                         "duplication_factor": 8})) == base

    def test_result_fields_change_the_hash(self):
        base = config_hash(cfg())
        assert config_hash(cfg(seed=1)) != base
        assert config_hash(cfg(end_time_ms=50)) != base
        assert config_hash(cfg(topology={"size": 4})) != base
        assert config_hash(cfg(flows={"kind": "none"})) != base
        assert config_hash(cfg(hardware={"raw_fidelity": 0.9})) != base
        assert config_hash(cfg(features={"purification": True},
                               flows={"endpoint_memories": 4})) != base


class TestMaterialize:
    def test_linear_chain_end_to_end(self):
        mats = materialize(cfg(topology={"kind": "linear", "size": 16}))
        assert len(mats.spec.routers) == 16
        assert len(mats.flows) == 1
        assert mats.flows[0].path == tuple(f"r{i}" for i in range(16))
        assert mats.pmap.p == 1
        assert mats.plan.round_period_ps == 350_000_000

    def test_link_length_defaults_to_hardware(self):
        mats = materialize(cfg(hardware={"qc_length_km": 2.0}))
        assert mats.spec.qlinks[0][2] == 2.0
        mats = materialize(cfg(hardware={"qc_length_km": 2.0},
                               topology={"length_km": 0.25}))
        assert mats.spec.qlinks[0][2] == 0.25

    def test_capacity_failure_names_the_router(self):
        with pytest.raises(ValidationError, match="r0 needs 25"):
            materialize(cfg(topology={"memories_per_router": 20}))

    def test_purification_demands_two_pairs_per_hop(self):
        with pytest.raises(ValidationError, match="at least 2"):
            materialize(cfg(features={"purification": True},
                            flows={"endpoint_memories": 1,
                                   "intermediate_memories": 2}))
        mats = materialize(cfg(features={"purification": True},
                               flows={"endpoint_memories": 2,
                                      "intermediate_memories": 4}))
        assert isinstance(mats, Materials)

    def test_caveman_partition_through_config(self):
        config = cfg(topology={"kind": "caveman", "caves": 4, "clique": 4},
                     flows={"kind": "none"}, workers=2,
                     partition={"method": "caveman"})
        mats = materialize(config)
        blocks = mats.pmap.blocks()
        assert [len(b) for b in blocks] == [8, 8]

    def test_anneal_partition_is_deterministic(self):
        config = cfg(topology={"kind": "caveman", "caves": 4, "clique": 4},
                     flows={"kind": "random", "seed": 2,
                            "endpoint_memories": 2,
                            "intermediate_memories": 4},
                     workers=4,
                     partition={"method": "anneal", "iterations": 200,
                                "seed": 5})
        a = materialize(config).pmap
        b = materialize(config).pmap
        assert a == b

    def test_partition_errors_become_validation_errors(self):
        spec = build_spec(cfg())
        with pytest.raises(ValidationError):
            build_partition(cfg(workers=5), spec, [])  # 5 workers, 2 routers
        config = cfg(topology={"kind": "caveman", "caves": 3, "clique": 4},
                     workers=2, partition={"method": "caveman"},
                     flows={"kind": "none"})
        with pytest.raises(ValidationError):
            materialize(config)

    def test_as_like_topology(self):
        mats = materialize(cfg(topology={"kind": "as_like", "size": 24,
                                         "seed": 3},
                               flows={"kind": "random", "seed": 1,
                                      "endpoint_memories": 1,
                                      "intermediate_memories": 2},
                               partition={"method": "blocks"}))
        assert len(mats.spec.routers) == 24
        assert len(mats.flows) == 24

    def test_no_flows_means_an_idle_network(self):
        mats = materialize(cfg(flows={"kind": "none"}))
        assert mats.flows == []
        assert all(not mems for mems in mats.plan.memories.values())
