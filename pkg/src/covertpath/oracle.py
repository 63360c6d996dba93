"""Exact path solver: enumerate feasible simple paths, keep the best one.

The brute-force optimum is the upper bound every learned policy is judged
against, so determinism matters: enumeration order is slot-index
lexicographic and ties break toward fewer hops, then lexicographic slots.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

from covertpath.model import (
    Aggregator,
    Channel,
    ChannelQuality,
    Layer,
    QualityReport,
    Scenario,
    channel_quality,
    covert_feasible,
    layer_weighted_detection,
)


@dataclass(frozen=True)
class Hop:
    """One edge of a path: the slot index at its source node plus the channel."""

    slot: int
    channel: Channel


@dataclass(frozen=True)
class FeasibleGraph:
    """Directed multigraph of covert-feasible channels, slot indices kept."""

    nodes: tuple[int, ...]
    adjacency: dict[int, tuple[Hop, ...]]

    @property
    def edge_count(self) -> int:
        return sum(len(hops) for hops in self.adjacency.values())


@dataclass(frozen=True)
class PathSelection:
    """An end-to-end selection: ordered channels, their slots, and scores."""

    channels: tuple[Channel, ...]
    slots: tuple[int, ...]
    report: QualityReport

    @property
    def hops(self) -> int:
        return len(self.channels)

    @property
    def node_sequence(self) -> tuple[int, ...]:
        return (self.channels[0].src,) + tuple(ch.dst for ch in self.channels)


def feasible_subgraph(scenario: Scenario) -> FeasibleGraph:
    """Keep exactly the channels whose covert interval contains tau.

    Parallel feasible channels between the same node pair stay distinct.
    """
    adjacency = {
        n.id: tuple(
            Hop(slot, ch)
            for slot, ch in enumerate(n.out_channels)
            if covert_feasible(ch, scenario.tau)
        )
        for n in scenario.nodes
    }
    return FeasibleGraph(
        nodes=tuple(n.id for n in scenario.nodes), adjacency=adjacency
    )


def enumerate_simple_paths(
    graph: FeasibleGraph, src: int, dst: int, max_hops: int
) -> Iterator[tuple[Hop, ...]]:
    """Yield every simple path src -> dst of length <= max_hops exactly once,
    lazily, in slot-index lexicographic order.

    src == dst yields nothing: there are no zero-length paths.
    """
    if src not in graph.adjacency or dst not in graph.adjacency:
        raise ValueError(f"src {src} or dst {dst} not in graph")
    if max_hops < 1:
        raise ValueError(f"max_hops must be >= 1, got {max_hops}")
    if src == dst:
        return

    path: list[Hop] = []
    visited = {src}

    def walk(current: int) -> Iterator[tuple[Hop, ...]]:
        for hop in graph.adjacency[current]:
            nxt = hop.channel.dst
            if nxt in visited:
                continue
            path.append(hop)
            if nxt == dst:
                yield tuple(path)
            elif len(path) < max_hops:
                visited.add(nxt)
                yield from walk(nxt)
                visited.remove(nxt)
            path.pop()

    yield from walk(src)


def path_quality(
    path,
    scenario: Scenario,
    aggregator: Aggregator = Aggregator.SUM,
    layer_weights: dict[Layer, float] | None = None,
) -> QualityReport:
    """Score a chained channel sequence.

    Accepts a sequence of Channel or of Hop.  Detection per channel is the
    layer-weighted combination over all wardens.
    """
    channels = [hop.channel if isinstance(hop, Hop) else hop for hop in path]
    if not channels:
        raise ValueError("path must contain at least one channel")
    for a, b in zip(channels, channels[1:]):
        if a.dst != b.src:
            raise ValueError(f"broken chain: {a.dst} -> {b.src}")

    per_channel = []
    for ch in channels:
        p = layer_weighted_detection(ch, scenario, layer_weights)
        per_channel.append(ChannelQuality(ch, p, channel_quality(ch, p)))
    scores = [cq.h_score for cq in per_channel]
    aggregate = sum(scores) if aggregator is Aggregator.SUM else min(scores)
    return QualityReport(
        per_channel=tuple(per_channel), aggregate=aggregate, aggregator=aggregator
    )


@dataclass(frozen=True)
class OptimumResult:
    """Solver outcome: the best selection (None if no feasible path) plus the
    number of partial paths expanded during the search."""

    selection: PathSelection | None
    nodes_expanded: int


def brute_force_optimum(
    scenario: Scenario,
    aggregator: Aggregator = Aggregator.SUM,
    max_hops: int | None = None,
    prune: bool = True,
    layer_weights: dict[Layer, float] | None = None,
) -> OptimumResult:
    """Search all feasible simple Alice->Bob paths for the quality-maximal one.

    Ties break toward fewer hops, then lexicographically smaller slot
    sequences, so repeated runs (and pruned vs. exhaustive search) agree
    exactly.  Pruning uses an admissible bound: for SUM, the current score
    plus (remaining allowed hops x best feasible per-channel score); for MIN,
    the current minimum.
    """
    graph = feasible_subgraph(scenario)
    if max_hops is None:
        max_hops = len(scenario.nodes) - 1

    # Flat per-node hop table: (slot, dst, h) with h layer-weighted.
    hop_table: dict[int, list[tuple[int, int, float]]] = {}
    h_max = 0.0
    for node_id, hops in graph.adjacency.items():
        rows = []
        for hop in hops:
            p = layer_weighted_detection(hop.channel, scenario, layer_weights)
            h = channel_quality(hop.channel, p)
            h_max = max(h_max, h)
            rows.append((hop.slot, hop.channel.dst, h))
        hop_table[node_id] = rows

    alice, bob = scenario.alice, scenario.bob
    is_sum = aggregator is Aggregator.SUM

    best_agg = float("-inf")
    best_slots: tuple[int, ...] | None = None
    best_path: list[tuple[int, int]] | None = None  # (node, slot) per hop
    expanded = 0

    visited = {alice}
    stack_path: list[tuple[int, int]] = []

    def consider(agg: float) -> None:
        nonlocal best_agg, best_slots, best_path
        slots = tuple(slot for _node, slot in stack_path)
        if (
            best_path is None
            or agg > best_agg
            or (
                agg == best_agg
                and (
                    len(slots) < len(best_slots)
                    or (len(slots) == len(best_slots) and slots < best_slots)
                )
            )
        ):
            best_agg = agg
            best_slots = slots
            best_path = list(stack_path)

    def walk(current: int, agg: float) -> None:
        nonlocal expanded
        depth = len(stack_path)
        for slot, dst, h in hop_table[current]:
            if dst in visited:
                continue
            expanded += 1
            new_agg = agg + h if is_sum else min(agg, h)
            if dst == bob:
                stack_path.append((current, slot))
                consider(new_agg)
                stack_path.pop()
                continue
            if depth + 1 >= max_hops:
                continue
            if prune and best_path is not None:
                bound = (
                    new_agg + (max_hops - depth - 1) * h_max if is_sum else new_agg
                )
                if bound < best_agg:
                    continue
            stack_path.append((current, slot))
            visited.add(dst)
            walk(dst, new_agg)
            visited.remove(dst)
            stack_path.pop()

    walk(alice, 0.0 if is_sum else float("inf"))

    if best_path is None:
        return OptimumResult(selection=None, nodes_expanded=expanded)

    channels = tuple(
        scenario.node(node_id).out_channels[slot] for node_id, slot in best_path
    )
    report = path_quality(channels, scenario, aggregator, layer_weights)
    selection = PathSelection(
        channels=channels, slots=tuple(best_slots), report=report
    )
    return OptimumResult(selection=selection, nodes_expanded=expanded)


def optimum_to_json(result: OptimumResult) -> dict:
    """Plot/report-friendly dict for the solver outcome."""
    if result.selection is None:
        return {"feasible": False, "nodes_expanded": result.nodes_expanded}
    sel = result.selection
    return {
        "feasible": True,
        "path": [f"{ch.src}/{slot}" for ch, slot in zip(sel.channels, sel.slots)],
        "per_channel": [
            {
                "channel": f"{cq.channel.src}/{slot}",
                "src": cq.channel.src,
                "dst": cq.channel.dst,
                "layer": cq.channel.layer.value,
                "p_detect": cq.p_detect,
                "h_score": cq.h_score,
            }
            for cq, slot in zip(sel.report.per_channel, sel.slots)
        ],
        "aggregate": sel.report.aggregate,
        "aggregator": sel.report.aggregator.value,
        "nodes_expanded": result.nodes_expanded,
    }
