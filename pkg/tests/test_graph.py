"""Plant graph: construction, validation invariants, rate scaling, hashing."""

import copy
from dataclasses import replace

import numpy as np
import pytest

from gnnode.errors import ConfigError, GraphValidationError
from gnnode.graph import (BOUNDARY, STREAMWISE, TRANSVERSE, PlantGraph,
                          build_graph, ensure_valid, validate)


@pytest.fixture()
def cfg(graph):
    return graph.to_config()


class TestCanonicalLayout:
    def test_node_counts(self, graph):
        assert graph.n_plant == 17
        assert len(graph.instrumented_idx) == 12
        assert len(graph.uninstrumented_idx) == 5
        assert len(graph.actuators) == 2
        assert len(graph.ambient) == 1
        assert graph.n_loops == 3

    def test_relation_counts(self, graph):
        assert len(graph.edges_by_relation(STREAMWISE)) == 16
        assert len(graph.edges_by_relation(TRANSVERSE)) == 6
        # one ambient-loss edge per plant node + power + inlet feed
        assert len(graph.edges_by_relation(BOUNDARY)) == 17 + 1

    def test_validates_clean(self, graph):
        rep = validate(graph)
        assert rep.ok
        assert rep.violations == []

    def test_uninstrumented_coverage_includes_inlet_actuator(self, graph):
        rep = validate(graph)
        assert set(rep.coverage) == {"T_ch", "HX1_L1", "HX1_L2",
                                     "HX2_L2", "HX2_L3"}
        # the loop-3 exchanger sees the inlet-temperature actuator directly
        assert "TF31" in rep.coverage["HX2_L3"]
        for srcs in rep.coverage.values():
            assert len(srcs) >= 1

    def test_special_node_lookups(self, graph):
        assert graph.plant[graph.heater_plant_index].component == "heater"
        assert graph.power_actuator.actuator_kind == "power"
        assert graph.inlet_actuator.actuator_kind == "inlet_temperature"

    def test_node_lookup_by_name_and_index(self, graph):
        n = graph.node("TF23")
        assert graph.node(n.index) is n
        with pytest.raises(ConfigError):
            graph.node("NOPE")

    def test_transverse_edges_paired(self, graph):
        pairs = {(e.src, e.dst) for e in graph.edges_by_relation(TRANSVERSE)}
        assert all((d, s) in pairs for s, d in pairs)

    def test_loops_partition_plant_and_inlet(self, graph):
        members = [m for loop in graph.loops.values() for m in loop]
        # every plant node except the heater, plus the inlet actuator
        assert len(members) == len(set(members)) == graph.n_plant
        assert "TF31" in graph.loops[3]
        assert "T_Havg" not in members  # coupled via chamber, not advection


class TestRateScales:
    def test_rate_scale_is_median_capacity_over_destination(self, graph):
        caps = np.array([n.capacity_scale for n in graph.plant])
        ref = float(np.median(caps))
        for e in graph.edges:
            if e.relation == BOUNDARY and e.component == "power":
                continue
            dst = graph.nodes[e.dst]
            if dst.kind != "plant":
                continue
            expected = ref / dst.capacity_scale
            assert e.rate_scale == pytest.approx(expected, rel=1e-12), \
                f"{graph.nodes[e.src].name}->{dst.name}"

    def test_capacity_uses_kappa(self, graph):
        n = graph.node("T_Havg")
        assert n.capacity_scale == pytest.approx(n.volume_m3 * n.kappa)
        assert n.kappa > 1.0


class TestHash:
    def test_hash_stable_across_rebuilds(self, graph, cfg):
        assert build_graph(cfg).graph_hash() == graph.graph_hash()

    def test_hash_changes_with_any_field(self, graph, cfg):
        cfg = copy.deepcopy(cfg)
        cfg["nodes"][0]["volume_m3"] *= 1.0001
        assert build_graph(cfg).graph_hash() != graph.graph_hash()

    def test_hash_insensitive_to_key_order(self, graph, cfg):
        shuffled = {k: cfg[k] for k in reversed(list(cfg))}
        assert build_graph(shuffled).graph_hash() == graph.graph_hash()


class TestValidationCatchesDefects:
    def _with_edges(self, graph, keep):
        """Rebuild the container with a filtered edge list."""
        return PlantGraph(graph.config, graph.nodes,
                          [e for e in graph.edges if keep(e)],
                          graph.loops, graph.ambient_temperature_k)

    def test_missing_transverse_reverse_flagged(self, graph):
        hx = graph.node("HX1_L1").index
        bad = self._with_edges(
            graph, lambda e: not (e.relation == TRANSVERSE and e.src == hx))
        rep = validate(bad)
        assert any("reverse" in v for v in rep.violations)

    def test_missing_ambient_loss_flagged(self, graph):
        tf13 = graph.node("TF13").index
        bad = self._with_edges(
            graph, lambda e: not (e.component == "ambient_loss"
                                  and e.dst == tf13))
        rep = validate(bad)
        assert any("ambient-loss" in v for v in rep.violations)

    def test_unknown_transverse_component_flagged(self, graph):
        edges = [e if e.relation != TRANSVERSE else
                 replace(e, component="sideways") for e in graph.edges]
        bad = PlantGraph(graph.config, graph.nodes, edges, graph.loops,
                         graph.ambient_temperature_k)
        rep = validate(bad)
        assert any("unknown component" in v for v in rep.violations)

    def test_uncovered_uninstrumented_node_flagged(self, cfg):
        bad = copy.deepcopy(cfg)
        for n in bad["nodes"]:
            # strip the chamber's instrumented neighbors
            if n["name"] in ("T_Havg", "TF12", "TF11"):
                n["instrumented"] = False
        rep = validate(build_graph(bad))
        assert any("T_ch" in v and "instrumented" in v
                   for v in rep.violations)

    def test_nonpositive_volume_flagged(self, cfg):
        bad = copy.deepcopy(cfg)
        bad["nodes"][2]["volume_m3"] = 0.0
        rep = validate(build_graph(bad))
        assert any("volume" in v for v in rep.violations)

    def test_ensure_valid_raises_with_all_violations(self, cfg):
        bad = copy.deepcopy(cfg)
        bad["nodes"][2]["volume_m3"] = 0.0
        bad["nodes"][3]["kappa"] = 0.5
        with pytest.raises(GraphValidationError) as ei:
            ensure_valid(build_graph(bad))
        assert "volume" in str(ei.value) and "kappa" in str(ei.value)

    def test_unknown_chain_member_rejected_at_build(self, cfg):
        bad = copy.deepcopy(cfg)
        bad["loops"][0]["chain"][1] = "GHOST"
        with pytest.raises(ConfigError):
            build_graph(bad)

    def test_missing_required_key_rejected(self, cfg):
        bad = copy.deepcopy(cfg)
        del bad["nodes"]
        with pytest.raises(ConfigError):
            build_graph(bad)


class TestNeighborQueries:
    def test_streamwise_in_neighbors_follow_loop_order(self, graph):
        # TF13 is fed by TF12 along loop 1
        (src,) = graph.in_neighbors("TF13", relation=STREAMWISE)
        assert graph.nodes[src].name == "TF12"

    def test_instrumented_neighbors_exclude_uninstrumented(self, graph):
        got = {graph.nodes[j].name
               for j in graph.instrumented_neighbors("T_ch")}
        assert got == {"T_Havg", "TF12", "TF11"}

    def test_undirected_neighbors_symmetric(self, graph):
        for n in graph.plant:
            for j in graph.undirected_neighbors(n.name):
                assert n.index in graph.undirected_neighbors(j)
