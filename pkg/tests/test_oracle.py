"""Exact-solver tests: enumeration, scoring, optimum, pruning equivalence."""

import dataclasses

import pytest

from covertpath.model import Aggregator, NodeSpec, Scenario
from covertpath.oracle import (
    brute_force_optimum,
    enumerate_simple_paths,
    feasible_subgraph,
    optimum_to_json,
    path_quality,
)
from covertpath.scenario import GenConfig, generate

from conftest import make_channel, triangle_scenario


def path_nodes(path):
    return [hop.channel.src for hop in path] + [path[-1].channel.dst]


class TestFeasibleSubgraph:
    def test_all_infeasible_gives_empty_graph(self):
        nodes = (
            NodeSpec(0, (0.0, 0.0), (make_channel(0, 1, lo=0.6, hi=0.9),)),
            NodeSpec(1, (1.0, 0.0), ()),
        )
        s = Scenario(nodes=nodes, wardens=(), tau=0.5, alice=0, bob=1)
        assert feasible_subgraph(s).edge_count == 0

    def test_all_feasible_keeps_every_edge(self, triangle):
        assert feasible_subgraph(triangle).edge_count == 3

    def test_mixed_filter_keeps_exact_subset(self):
        chans = tuple(
            make_channel(0, 1, lo=0.0, hi=0.9 if i < 5 else 0.2) for i in range(9)
        )
        nodes = (NodeSpec(0, (0.0, 0.0), chans), NodeSpec(1, (1.0, 0.0), ()))
        s = Scenario(nodes=nodes, wardens=(), tau=0.5, alice=0, bob=1)
        g = feasible_subgraph(s)
        assert g.edge_count == 5
        assert [hop.slot for hop in g.adjacency[0]] == [0, 1, 2, 3, 4]

    def test_parallel_edges_stay_distinct(self):
        chans = (make_channel(0, 1, v=1.0), make_channel(0, 1, v=2.0))
        nodes = (NodeSpec(0, (0.0, 0.0), chans), NodeSpec(1, (1.0, 0.0), ()))
        s = Scenario(nodes=nodes, wardens=(), tau=0.5, alice=0, bob=1)
        assert feasible_subgraph(s).edge_count == 2


class TestEnumerateSimplePaths:
    def test_triangle_enumeration(self, triangle):
        g = feasible_subgraph(triangle)
        paths = list(enumerate_simple_paths(g, 0, 1, max_hops=2))
        assert [path_nodes(p) for p in paths] == [[0, 1], [0, 2, 1]]

    def test_disconnected_dst_is_empty(self):
        nodes = (
            NodeSpec(0, (0.0, 0.0), ()),
            NodeSpec(1, (1.0, 0.0), (make_channel(1, 0),)),
        )
        s = Scenario(nodes=nodes, wardens=(), tau=0.5, alice=0, bob=1)
        assert list(enumerate_simple_paths(feasible_subgraph(s), 0, 1, 1)) == []

    def test_parallel_edges_give_two_paths(self):
        chans = (make_channel(0, 1, v=1.0), make_channel(0, 1, v=2.0))
        nodes = (NodeSpec(0, (0.0, 0.0), chans), NodeSpec(1, (1.0, 0.0), ()))
        s = Scenario(nodes=nodes, wardens=(), tau=0.5, alice=0, bob=1)
        paths = list(enumerate_simple_paths(feasible_subgraph(s), 0, 1, 3))
        assert len(paths) == 2
        assert [p[0].slot for p in paths] == [0, 1]

    def test_src_equals_dst_yields_nothing(self, triangle):
        g = feasible_subgraph(triangle)
        assert list(enumerate_simple_paths(g, 0, 0, 3)) == []

    def test_max_hops_caps_length(self, triangle):
        g = feasible_subgraph(triangle)
        paths = list(enumerate_simple_paths(g, 0, 1, max_hops=1))
        assert [path_nodes(p) for p in paths] == [[0, 1]]

    def test_no_node_revisits_anywhere(self):
        s = generate(GenConfig(n_nodes=7, slots_per_node=(2, 4), seed=13))
        g = feasible_subgraph(s)
        for path in enumerate_simple_paths(g, s.alice, s.bob, len(s.nodes) - 1):
            nodes = path_nodes(path)
            assert len(nodes) == len(set(nodes))

    def test_distinct_paths_once_each(self):
        s = generate(GenConfig(n_nodes=7, slots_per_node=(2, 4), seed=17))
        g = feasible_subgraph(s)
        sigs = [tuple(h.slot for h in p) + (len(p),) for p in
                enumerate_simple_paths(g, s.alice, s.bob, len(s.nodes) - 1)]
        full = [tuple((h.channel.src, h.slot) for h in p) for p in
                enumerate_simple_paths(g, s.alice, s.bob, len(s.nodes) - 1)]
        assert len(full) == len(set(full))
        assert len(sigs) == len(full)


class TestPathQuality:
    def test_single_channel_both_aggregators(self, triangle):
        ch = triangle.nodes[0].out_channels[0]
        for agg in Aggregator:
            report = path_quality([ch], triangle, agg)
            assert report.aggregate == pytest.approx(2.0, abs=1e-12)

    def test_sum_and_min_two_channels(self, triangle):
        path = [triangle.nodes[0].out_channels[1], triangle.nodes[2].out_channels[0]]
        assert path_quality(path, triangle, Aggregator.SUM).aggregate == pytest.approx(5.0)
        assert path_quality(path, triangle, Aggregator.MIN).aggregate == pytest.approx(1.0)

    def test_empty_path_rejected(self, triangle):
        with pytest.raises(ValueError, match="at least one"):
            path_quality([], triangle)

    def test_broken_chain_rejected(self, triangle):
        path = [triangle.nodes[0].out_channels[0], triangle.nodes[2].out_channels[0]]
        with pytest.raises(ValueError, match="broken chain"):
            path_quality(path, triangle)


class TestBruteForceOptimum:
    def test_triangle_sum_prefers_relay(self, triangle):
        sel = brute_force_optimum(triangle, Aggregator.SUM).selection
        assert sel.node_sequence == (0, 2, 1)
        assert sel.report.aggregate == pytest.approx(5.0)

    def test_triangle_min_prefers_direct(self, triangle):
        sel = brute_force_optimum(triangle, Aggregator.MIN).selection
        assert sel.node_sequence == (0, 1)
        assert sel.report.aggregate == pytest.approx(2.0)

    def test_infeasible_returns_none(self):
        nodes = (
            NodeSpec(0, (0.0, 0.0), (make_channel(0, 1, lo=0.8, hi=0.9),)),
            NodeSpec(1, (1.0, 0.0), ()),
        )
        s = Scenario(nodes=nodes, wardens=(), tau=0.5, alice=0, bob=1)
        result = brute_force_optimum(s)
        assert result.selection is None
        assert optimum_to_json(result)["feasible"] is False

    def test_tie_breaks_to_fewer_hops(self):
        # Direct path and relay path both score 4.0; fewer hops must win.
        s = triangle_scenario(h_ab=4.0, h_ac=1.0, h_cb=3.0)
        sel = brute_force_optimum(s, Aggregator.SUM).selection
        assert sel.node_sequence == (0, 1)

    def test_tie_breaks_to_lexicographic_slots(self):
        # Two parallel equal channels: slot 0 must win.
        chans = (make_channel(0, 1, v=2.0), make_channel(0, 1, v=2.0))
        nodes = (NodeSpec(0, (0.0, 0.0), chans), NodeSpec(1, (1.0, 0.0), ()))
        s = Scenario(nodes=nodes, wardens=(), tau=0.5, alice=0, bob=1)
        assert brute_force_optimum(s).selection.slots == (0,)

    def test_optimum_satisfies_selection_invariants(self):
        for seed in range(10):
            s = generate(GenConfig(n_nodes=8, slots_per_node=(2, 4), seed=seed))
            sel = brute_force_optimum(s).selection
            nodes = sel.node_sequence
            assert nodes[0] == s.alice and nodes[-1] == s.bob
            assert len(nodes) == len(set(nodes))
            for a, b in zip(sel.channels, sel.channels[1:]):
                assert a.dst == b.src
            for ch in sel.channels:
                assert ch.covert_lo <= s.tau <= ch.covert_hi

    def test_pruned_equals_exhaustive_small_scenarios(self):
        for seed in range(40):
            s = generate(GenConfig(n_nodes=8, slots_per_node=(2, 5), seed=seed))
            for agg in Aggregator:
                pruned = brute_force_optimum(s, agg, prune=True).selection
                full = brute_force_optimum(s, agg, prune=False).selection
                assert pruned.slots == full.slots, f"seed {seed} {agg}"
                assert pruned.report.aggregate == full.report.aggregate

    def test_pruning_expands_no_more_nodes(self):
        s = generate(GenConfig(n_nodes=10, slots_per_node=(3, 6), seed=2))
        pruned = brute_force_optimum(s, prune=True)
        full = brute_force_optimum(s, prune=False)
        assert pruned.nodes_expanded <= full.nodes_expanded
        assert pruned.selection.slots == full.selection.slots

    def test_adding_channel_never_hurts_sum_optimum(self):
        s = generate(GenConfig(n_nodes=6, slots_per_node=(1, 3), feasible_fraction=1.0, seed=5))
        base = brute_force_optimum(s, Aggregator.SUM).selection.report.aggregate
        # Bolt a fresh feasible channel onto alice.
        extra = make_channel(s.alice, 2, v=0.5)
        node0 = s.nodes[0]
        grown = dataclasses.replace(
            s, nodes=(dataclasses.replace(node0, out_channels=node0.out_channels + (extra,)),)
            + s.nodes[1:]
        )
        bigger = brute_force_optimum(grown, Aggregator.SUM).selection.report.aggregate
        assert bigger >= base - 1e-12

    def test_removing_first_optimal_channel_lowers_or_keeps(self):
        for seed in (3, 8, 21):
            s = generate(GenConfig(n_nodes=7, slots_per_node=(2, 4), seed=seed))
            sel = brute_force_optimum(s).selection
            first_slot = sel.slots[0]
            node0 = s.node(s.alice)
            remaining = tuple(
                ch for i, ch in enumerate(node0.out_channels) if i != first_slot
            )
            pruned_nodes = tuple(
                dataclasses.replace(n, out_channels=remaining) if n.id == s.alice else n
                for n in s.nodes
            )
            s2 = dataclasses.replace(s, nodes=pruned_nodes)
            result = brute_force_optimum(s2)
            if result.selection is not None:
                assert result.selection.report.aggregate <= sel.report.aggregate + 1e-12

    def test_max_hops_restricts_search(self, triangle):
        sel = brute_force_optimum(triangle, Aggregator.SUM, max_hops=1).selection
        assert sel.node_sequence == (0, 1)

    def test_report_json_shape(self, triangle):
        payload = optimum_to_json(brute_force_optimum(triangle))
        assert payload["feasible"] is True
        assert payload["path"] == ["0/1", "2/0"]
        assert payload["aggregate"] == pytest.approx(5.0)
        assert payload["aggregator"] == "sum"
        assert payload["nodes_expanded"] > 0
        assert len(payload["per_channel"]) == 2
