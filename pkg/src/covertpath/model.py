"""Domain types and scoring formulas for covert channel path selection.

Everything here is a plain value type or a pure function: a scenario is a
static snapshot of a cloud-edge-IoT network (nodes with outgoing covert
channel slots, passive wardens, a covertness threshold), and the functions
score channels by covert capacity times transmission success rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property


class Layer(Enum):
    """Which protocol layer a covert channel lives in."""

    PHYSICAL = "physical"
    NETWORK = "network"
    APPLICATION = "application"


class Aggregator(Enum):
    """How per-channel quality scores combine along a path."""

    SUM = "sum"
    MIN = "min"


# Wardens watch each layer with different sensitivity: physical signals are
# the easiest to monitor, application-layer embedding the hardest.  These
# weights multiply the combined warden detection probability per channel and
# must match the weights a scenario was generated with (the generator's
# defaults are these same values).
DEFAULT_LAYER_DETECT_WEIGHTS: dict[Layer, float] = {
    Layer.PHYSICAL: 1.0,
    Layer.NETWORK: 0.7,
    Layer.APPLICATION: 0.4,
}


class ScenarioIntegrityError(ValueError):
    """A lookup hit a node or channel that is not part of the scenario."""


@dataclass(frozen=True)
class Channel:
    """A directed covert link between two nodes.

    capacity_v is the nominal throughput, car_sigma the fraction of it usable
    while staying covert, and [covert_lo, covert_hi] the interval of warden
    thresholds for which the channel passes as innocuous.
    """

    src: int
    dst: int
    layer: Layer
    capacity_v: float
    car_sigma: float
    covert_lo: float
    covert_hi: float

    @property
    def covert_capacity(self) -> float:
        return self.capacity_v * self.car_sigma


@dataclass(frozen=True)
class Warden:
    """A passive monitor at a fixed position with detection ability in [0, 1]."""

    position: tuple[float, float]
    detect_d: float

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(self.position))


@dataclass(frozen=True)
class NodeSpec:
    """A network node: position plus its ordered outgoing channel slots."""

    id: int
    position: tuple[float, float]
    out_channels: tuple[Channel, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(self.position))
        object.__setattr__(self, "out_channels", tuple(self.out_channels))


@dataclass(frozen=True)
class Scenario:
    """The full static world: topology, wardens, threshold, endpoints.

    prng records the algorithm that generated the scenario (metadata carried
    through serialization; hand-built scenarios keep the default).
    """

    nodes: tuple[NodeSpec, ...]
    wardens: tuple[Warden, ...]
    tau: float
    alice: int
    bob: int
    k_max: int = 9
    prng: str = "numpy-pcg64"

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "wardens", tuple(self.wardens))

    @cached_property
    def node_index(self) -> dict[int, NodeSpec]:
        return {n.id: n for n in self.nodes}

    def node(self, node_id: int) -> NodeSpec:
        try:
            return self.node_index[node_id]
        except KeyError:
            raise ScenarioIntegrityError(f"no node with id {node_id}") from None

    def all_channels(self):
        """Yield (node_id, slot_index, channel) over the whole inventory."""
        for n in self.nodes:
            for slot, ch in enumerate(n.out_channels):
                yield n.id, slot, ch


@dataclass(frozen=True)
class ChannelQuality:
    """Scored view of one channel: detection probability and quality score."""

    channel: Channel
    p_detect: float
    h_score: float


@dataclass(frozen=True)
class QualityReport:
    """Per-channel scores plus their aggregate for one candidate path."""

    per_channel: tuple[ChannelQuality, ...]
    aggregate: float
    aggregator: Aggregator

    def __post_init__(self):
        object.__setattr__(self, "per_channel", tuple(self.per_channel))


def effective_detection(warden: Warden, src_node: NodeSpec) -> float:
    """Warden ability discounted by the reciprocal of its distance to the
    channel's source node, clamped into [0, 1].

    A co-located warden (distance 0) sees everything: returns 1.
    """
    dx = warden.position[0] - src_node.position[0]
    dy = warden.position[1] - src_node.position[1]
    dist = math.hypot(dx, dy)
    if dist == 0.0:
        return 1.0
    return min(1.0, max(0.0, warden.detect_d / dist))


def combined_detection(channel: Channel, scenario: Scenario) -> float:
    """Probability that at least one warden flags traffic on the channel.

    Wardens observe independently, so the combined probability is the
    complement of the product of the per-warden misses.  No wardens means 0.
    """
    src_node = scenario.node(channel.src)
    miss = 1.0
    for w in scenario.wardens:
        miss *= 1.0 - effective_detection(w, src_node)
    return 1.0 - miss


def covert_feasible(channel: Channel, tau: float) -> bool:
    """True when the warden threshold falls inside the channel's covert
    interval (boundaries inclusive), i.e. the channel passes as innocuous."""
    return channel.covert_lo <= tau <= channel.covert_hi


def channel_quality(channel: Channel, p_detect: float) -> float:
    """Quality score: covert capacity times transmission success rate."""
    if not 0.0 <= p_detect <= 1.0:
        raise ValueError(f"p_detect must be in [0, 1], got {p_detect}")
    return channel.capacity_v * channel.car_sigma * (1.0 - p_detect)


def layer_weighted_detection(
    channel: Channel,
    scenario: Scenario,
    layer_weights: dict[Layer, float] | None = None,
) -> float:
    """combined_detection scaled by the channel layer's warden sensitivity,
    clamped into [0, 1]."""
    weights = DEFAULT_LAYER_DETECT_WEIGHTS if layer_weights is None else layer_weights
    p = combined_detection(channel, scenario) * weights[channel.layer]
    return min(1.0, max(0.0, p))


def validate_scenario(scenario: Scenario) -> list[str]:
    """Check every structural invariant; returns all violations (empty = ok)."""
    violations: list[str] = []
    seen_ids: set[int] = set()
    for n in scenario.nodes:
        if n.id < 0:
            violations.append(f"node id {n.id} is negative")
        if n.id in seen_ids:
            violations.append(f"duplicate node id {n.id}")
        seen_ids.add(n.id)

    if scenario.k_max < 1:
        violations.append(f"k_max must be positive, got {scenario.k_max}")
    if not 0.0 <= scenario.tau <= 1.0:
        violations.append(f"tau must be in [0, 1], got {scenario.tau}")

    for n in scenario.nodes:
        if len(n.out_channels) > scenario.k_max:
            violations.append(
                f"node {n.id}: slot bound exceeded "
                f"({len(n.out_channels)} channels, k_max={scenario.k_max})"
            )
        for slot, ch in enumerate(n.out_channels):
            where = f"node {n.id} slot {slot}"
            if ch.src != n.id:
                violations.append(f"{where}: src {ch.src} does not match node id")
            if ch.src == ch.dst:
                violations.append(f"{where}: self-loop")
            if ch.dst not in seen_ids:
                violations.append(f"{where}: unknown destination node {ch.dst}")
            if ch.capacity_v < 0:
                violations.append(f"{where}: capacity_v {ch.capacity_v} is negative")
            if not 0.0 <= ch.car_sigma <= 1.0:
                violations.append(f"{where}: car_sigma {ch.car_sigma} outside [0, 1]")
            if not 0.0 <= ch.covert_lo <= 1.0 or not 0.0 <= ch.covert_hi <= 1.0:
                violations.append(f"{where}: covert interval outside [0, 1]")
            if ch.covert_lo > ch.covert_hi:
                violations.append(
                    f"{where}: covert_lo {ch.covert_lo} > covert_hi {ch.covert_hi}"
                )

    for i, w in enumerate(scenario.wardens):
        if not 0.0 <= w.detect_d <= 1.0:
            violations.append(f"warden {i}: detect_d {w.detect_d} outside [0, 1]")

    if scenario.alice not in seen_ids:
        violations.append(f"alice node {scenario.alice} does not exist")
    if scenario.bob not in seen_ids:
        violations.append(f"bob node {scenario.bob} does not exist")
    if scenario.alice == scenario.bob:
        violations.append("alice and bob must be distinct nodes")

    return violations
