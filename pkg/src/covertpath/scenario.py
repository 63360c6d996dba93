"""Seeded scenario generation and a canonical, strict JSON file format.

Generation is a pure function of (config, seed): same seed, same bytes.
The serialized form sorts keys, keeps arrays in declaration order, and
renders floats as shortest round-trip decimals, so parse(serialize(s)) == s.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from covertpath.model import (
    Channel,
    Layer,
    NodeSpec,
    Scenario,
    Warden,
    covert_feasible,
    validate_scenario,
)

FORMAT_VERSION = "1"
PRNG_NAME = "numpy-pcg64"


class GenerationError(RuntimeError):
    """The generator could not produce a solvable scenario for this config."""


class ScenarioParseError(ValueError):
    """The text is not a well-formed scenario file."""


class UnknownFieldError(ScenarioParseError):
    """Strict parsing hit a field the format does not define."""

    def __init__(self, path: str):
        super().__init__(f"unknown field at {path}")
        self.path = path


class ScenarioInvariantError(ScenarioParseError):
    """The file parsed but the scenario violates a structural invariant."""

    def __init__(self, violations: list[str]):
        super().__init__("invalid scenario: " + "; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class LayerRanges:
    """Sampling ranges for one layer plus its warden sensitivity weight."""

    v_range: tuple[float, float]
    sigma_range: tuple[float, float]
    detect_weight: float


# Layer defaults mirror the qualitative trade-offs: physical channels are
# stealthy but low capacity, network channels trade capacity for exposure,
# application channels are highly available and hardest to monitor.
DEFAULT_LAYER_RANGES: dict[Layer, LayerRanges] = {
    Layer.PHYSICAL: LayerRanges((2.0, 6.0), (0.3, 0.7), 1.0),
    Layer.NETWORK: LayerRanges((4.0, 10.0), (0.5, 0.9), 0.7),
    Layer.APPLICATION: LayerRanges((1.0, 4.0), (0.7, 1.0), 0.4),
}


@dataclass(frozen=True)
class GenConfig:
    """Knobs for random scenario generation at the paper-scale defaults."""

    n_nodes: int = 20
    k_max: int = 9
    slots_per_node: tuple[int, int] = (3, 9)
    n_wardens: int = 3
    tau: float = 0.5
    feasible_fraction: float = 0.8
    layer_ranges: dict[Layer, LayerRanges] = field(
        default_factory=lambda: dict(DEFAULT_LAYER_RANGES)
    )
    arena_side: float = 10.0
    seed: int = 0

    def validate(self) -> list[str]:
        problems = []
        if self.n_nodes < 2:
            problems.append("n_nodes must be at least 2")
        if self.k_max < 1:
            problems.append("k_max must be positive")
        lo, hi = self.slots_per_node
        if not (0 <= lo <= hi <= self.k_max):
            problems.append("slots_per_node must satisfy 0 <= lo <= hi <= k_max")
        if self.n_wardens < 0:
            problems.append("n_wardens must be nonnegative")
        if not 0.0 <= self.tau <= 1.0:
            problems.append("tau must be in [0, 1]")
        if not 0.0 <= self.feasible_fraction <= 1.0:
            problems.append("feasible_fraction must be in [0, 1]")
        if self.arena_side <= 0:
            problems.append("arena_side must be positive")
        for layer in Layer:
            if layer not in self.layer_ranges:
                problems.append(f"missing layer ranges for {layer.value}")
        return problems


MAX_GENERATION_ATTEMPTS = 200


def _sample_covert_interval(
    rng: np.random.Generator, tau: float, feasible: bool
) -> tuple[float, float]:
    """Draw [lo, hi] that straddles tau when feasible, excludes it otherwise."""
    if feasible:
        return tau * rng.random(), tau + (1.0 - tau) * rng.random()
    # Infeasible side: pick above or below tau, whichever is possible.
    above_ok = tau < 1.0
    below_ok = tau > 0.0
    go_above = above_ok and (not below_ok or rng.random() < 0.5)
    if go_above:
        lo = tau + (1.0 - tau) * rng.random()
        hi = lo + (1.0 - lo) * rng.random()
    else:
        hi = tau * rng.random()
        lo = hi * rng.random()
    return lo, hi


def _feasible_reachable(nodes: list[NodeSpec], tau: float, alice: int, bob: int) -> bool:
    """BFS over covert-feasible channels only."""
    adj: dict[int, list[int]] = {n.id: [] for n in nodes}
    for n in nodes:
        for ch in n.out_channels:
            if covert_feasible(ch, tau):
                adj[n.id].append(ch.dst)
    seen = {alice}
    queue = deque([alice])
    while queue:
        cur = queue.popleft()
        if cur == bob:
            return True
        for nxt in adj[cur]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return False


def generate(config: GenConfig) -> Scenario:
    """Generate a solvable scenario, deterministic in (config, config.seed).

    Alice is node 0 and Bob is node n_nodes-1.  Channel sets are redrawn
    (bounded attempts) until the covert-feasible subgraph connects them.
    """
    problems = config.validate()
    if problems:
        raise GenerationError("invalid config: " + "; ".join(problems))

    rng = np.random.default_rng(config.seed)
    layers = list(Layer)
    alice, bob = 0, config.n_nodes - 1

    positions = [
        (float(x), float(y))
        for x, y in rng.uniform(0.0, config.arena_side, size=(config.n_nodes, 2))
    ]
    wardens = tuple(
        Warden(
            position=(float(x), float(y)),
            detect_d=float(rng.uniform(0.3, 0.9)),
        )
        for x, y in rng.uniform(0.0, config.arena_side, size=(config.n_wardens, 2))
    )

    lo_slots, hi_slots = config.slots_per_node
    for _ in range(MAX_GENERATION_ATTEMPTS):
        nodes = []
        for node_id in range(config.n_nodes):
            n_slots = int(rng.integers(lo_slots, hi_slots + 1))
            channels = []
            for _slot in range(n_slots):
                dst = int(rng.integers(0, config.n_nodes - 1))
                if dst >= node_id:
                    dst += 1  # uniform over nodes != node_id
                layer = layers[int(rng.integers(0, len(layers)))]
                ranges = config.layer_ranges[layer]
                v = float(rng.uniform(*ranges.v_range))
                sigma = float(rng.uniform(*ranges.sigma_range))
                feasible = bool(rng.random() < config.feasible_fraction)
                lo, hi = _sample_covert_interval(rng, config.tau, feasible)
                channels.append(
                    Channel(
                        src=node_id,
                        dst=dst,
                        layer=layer,
                        capacity_v=v,
                        car_sigma=sigma,
                        covert_lo=float(lo),
                        covert_hi=float(hi),
                    )
                )
            nodes.append(
                NodeSpec(id=node_id, position=positions[node_id], out_channels=tuple(channels))
            )

        if _feasible_reachable(nodes, config.tau, alice, bob):
            scenario = Scenario(
                nodes=tuple(nodes),
                wardens=wardens,
                tau=config.tau,
                alice=alice,
                bob=bob,
                k_max=config.k_max,
                prng=PRNG_NAME,
            )
            violations = validate_scenario(scenario)
            if violations:  # pragma: no cover - generator bug guard
                raise GenerationError(
                    f"seed {config.seed}: generated invalid scenario: {violations}"
                )
            return scenario

    raise GenerationError(
        f"seed {config.seed}: no solvable scenario within "
        f"{MAX_GENERATION_ATTEMPTS} attempts; loosen the config"
    )


# --- serialization ---------------------------------------------------------


def _channel_payload(ch: Channel) -> dict:
    return {
        "src": ch.src,
        "dst": ch.dst,
        "layer": ch.layer.value,
        "capacity_v": ch.capacity_v,
        "car_sigma": ch.car_sigma,
        "covert_lo": ch.covert_lo,
        "covert_hi": ch.covert_hi,
    }


def serialize(scenario: Scenario) -> str:
    """Canonical JSON: sorted keys, declaration-order arrays, shortest
    round-trip floats, newline-terminated."""
    payload = {
        "format_version": FORMAT_VERSION,
        "prng": scenario.prng,
        "nodes": [
            {
                "id": n.id,
                "position": list(n.position),
                "out_channels": [_channel_payload(ch) for ch in n.out_channels],
            }
            for n in scenario.nodes
        ],
        "wardens": [
            {"position": list(w.position), "detect_d": w.detect_d}
            for w in scenario.wardens
        ],
        "tau": scenario.tau,
        "alice": scenario.alice,
        "bob": scenario.bob,
        "k_max": scenario.k_max,
    }
    return json.dumps(payload, sort_keys=True, separators=(", ", ": ")) + "\n"


_LAYER_BY_TAG = {layer.value: layer for layer in Layer}

_TOP_FIELDS = {"format_version", "prng", "nodes", "wardens", "tau", "alice", "bob", "k_max"}
_NODE_FIELDS = {"id", "position", "out_channels"}
_CHANNEL_FIELDS = {"src", "dst", "layer", "capacity_v", "car_sigma", "covert_lo", "covert_hi"}
_WARDEN_FIELDS = {"position", "detect_d"}


def _require(obj: dict, fields: set[str], path: str) -> None:
    for key in obj:
        if key not in fields:
            raise UnknownFieldError(f"{path}.{key}")
    for key in fields:
        if key not in obj:
            raise ScenarioParseError(f"missing field {path}.{key}")


def _as_number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioParseError(f"{path} must be a number, got {value!r}")
    return float(value)


def _as_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScenarioParseError(f"{path} must be an integer, got {value!r}")
    return value


def _as_position(value, path: str) -> tuple[float, float]:
    if not isinstance(value, list) or len(value) != 2:
        raise ScenarioParseError(f"{path} must be a [x, y] pair")
    return (_as_number(value[0], f"{path}[0]"), _as_number(value[1], f"{path}[1]"))


def _parse_channel(obj, path: str) -> Channel:
    if not isinstance(obj, dict):
        raise ScenarioParseError(f"{path} must be an object")
    _require(obj, _CHANNEL_FIELDS, path)
    tag = obj["layer"]
    if tag not in _LAYER_BY_TAG:
        raise ScenarioParseError(f"{path}.layer: unknown layer tag {tag!r}")
    return Channel(
        src=_as_int(obj["src"], f"{path}.src"),
        dst=_as_int(obj["dst"], f"{path}.dst"),
        layer=_LAYER_BY_TAG[tag],
        capacity_v=_as_number(obj["capacity_v"], f"{path}.capacity_v"),
        car_sigma=_as_number(obj["car_sigma"], f"{path}.car_sigma"),
        covert_lo=_as_number(obj["covert_lo"], f"{path}.covert_lo"),
        covert_hi=_as_number(obj["covert_hi"], f"{path}.covert_hi"),
    )


def parse(text: str) -> Scenario:
    """Parse the serialize() format strictly and validate the result.

    Raises ScenarioParseError (malformed), UnknownFieldError (extra field,
    with its path) or ScenarioInvariantError (structurally invalid scenario).
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"malformed JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ScenarioParseError("top level must be an object")
    _require(data, _TOP_FIELDS, "$")

    if data["format_version"] != FORMAT_VERSION:
        raise ScenarioParseError(
            f"unsupported format_version {data['format_version']!r}"
        )
    if not isinstance(data["prng"], str):
        raise ScenarioParseError("$.prng must be a string")
    if not isinstance(data["nodes"], list):
        raise ScenarioParseError("$.nodes must be an array")
    if not isinstance(data["wardens"], list):
        raise ScenarioParseError("$.wardens must be an array")

    nodes = []
    for i, nobj in enumerate(data["nodes"]):
        path = f"$.nodes[{i}]"
        if not isinstance(nobj, dict):
            raise ScenarioParseError(f"{path} must be an object")
        _require(nobj, _NODE_FIELDS, path)
        if not isinstance(nobj["out_channels"], list):
            raise ScenarioParseError(f"{path}.out_channels must be an array")
        channels = tuple(
            _parse_channel(cobj, f"{path}.out_channels[{j}]")
            for j, cobj in enumerate(nobj["out_channels"])
        )
        nodes.append(
            NodeSpec(
                id=_as_int(nobj["id"], f"{path}.id"),
                position=_as_position(nobj["position"], f"{path}.position"),
                out_channels=channels,
            )
        )

    wardens = []
    for i, wobj in enumerate(data["wardens"]):
        path = f"$.wardens[{i}]"
        if not isinstance(wobj, dict):
            raise ScenarioParseError(f"{path} must be an object")
        _require(wobj, _WARDEN_FIELDS, path)
        wardens.append(
            Warden(
                position=_as_position(wobj["position"], f"{path}.position"),
                detect_d=_as_number(wobj["detect_d"], f"{path}.detect_d"),
            )
        )

    scenario = Scenario(
        nodes=tuple(nodes),
        wardens=tuple(wardens),
        tau=_as_number(data["tau"], "$.tau"),
        alice=_as_int(data["alice"], "$.alice"),
        bob=_as_int(data["bob"], "$.bob"),
        k_max=_as_int(data["k_max"], "$.k_max"),
        prng=data["prng"],
    )
    violations = validate_scenario(scenario)
    if violations:
        raise ScenarioInvariantError(violations)
    return scenario


# --- GenConfig files ---------------------------------------------------------

_CONFIG_FIELDS = {
    "n_nodes", "k_max", "slots_per_node", "n_wardens", "tau",
    "feasible_fraction", "layer_ranges", "arena_side", "seed",
}
_LAYER_RANGE_FIELDS = {"v_range", "sigma_range", "detect_weight"}


def serialize_gen_config(config: GenConfig) -> str:
    payload = {
        "n_nodes": config.n_nodes,
        "k_max": config.k_max,
        "slots_per_node": list(config.slots_per_node),
        "n_wardens": config.n_wardens,
        "tau": config.tau,
        "feasible_fraction": config.feasible_fraction,
        "layer_ranges": {
            layer.value: {
                "v_range": list(r.v_range),
                "sigma_range": list(r.sigma_range),
                "detect_weight": r.detect_weight,
            }
            for layer, r in config.layer_ranges.items()
        },
        "arena_side": config.arena_side,
        "seed": config.seed,
    }
    return json.dumps(payload, sort_keys=True, separators=(", ", ": ")) + "\n"


def parse_gen_config(text: str) -> GenConfig:
    """Strict GenConfig reader; missing fields fall back to the defaults."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"malformed JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ScenarioParseError("top level must be an object")
    for key in data:
        if key not in _CONFIG_FIELDS:
            raise UnknownFieldError(f"$.{key}")

    layer_ranges = dict(DEFAULT_LAYER_RANGES)
    if "layer_ranges" in data:
        for tag, entry in data["layer_ranges"].items():
            if tag not in _LAYER_BY_TAG:
                raise UnknownFieldError(f"$.layer_ranges.{tag}")
            for key in entry:
                if key not in _LAYER_RANGE_FIELDS:
                    raise UnknownFieldError(f"$.layer_ranges.{tag}.{key}")
            layer_ranges[_LAYER_BY_TAG[tag]] = LayerRanges(
                v_range=tuple(entry["v_range"]),
                sigma_range=tuple(entry["sigma_range"]),
                detect_weight=float(entry["detect_weight"]),
            )

    base = GenConfig()
    config = GenConfig(
        n_nodes=data.get("n_nodes", base.n_nodes),
        k_max=data.get("k_max", base.k_max),
        slots_per_node=tuple(data.get("slots_per_node", base.slots_per_node)),
        n_wardens=data.get("n_wardens", base.n_wardens),
        tau=data.get("tau", base.tau),
        feasible_fraction=data.get("feasible_fraction", base.feasible_fraction),
        layer_ranges=layer_ranges,
        arena_side=data.get("arena_side", base.arena_side),
        seed=data.get("seed", base.seed),
    )
    problems = config.validate()
    if problems:
        raise ScenarioInvariantError(problems)
    return config
