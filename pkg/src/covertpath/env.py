"""Hop-by-hop path construction as a masked discrete MDP.

The agent walks from Alice toward Bob, one channel slot per step.  Rewards
are the per-channel quality scores, so a successful SUM-mode episode return
equals the oracle's path_quality for the same path and the brute-force
optimum is the exact ceiling on achievable return.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from covertpath.model import (
    Aggregator,
    Layer,
    Scenario,
    channel_quality,
    covert_feasible,
    layer_weighted_detection,
)

DEFAULT_R_FAIL = -5.0


class EnvContractError(RuntimeError):
    """The caller used the environment against its episode protocol."""


@dataclass(frozen=True)
class EnvState:
    """Snapshot of one episode: where we are and what we have used."""

    current: int
    visited: tuple[bool, ...]
    steps: int
    done: bool
    last_reward: float


@dataclass(frozen=True)
class TrajectoryRow:
    """One logged transition for offline constraint auditing."""

    episode: int
    step: int
    node_from: int
    slot: int
    node_to: int
    reward: float
    done: bool
    success: bool


class CovertPathEnv:
    """Single-episode-at-a-time environment over a fixed scenario.

    One instance is single-threaded; run independent instances for parallel
    rollouts.  Transitions are deterministic: all randomness lives in the
    policy.
    """

    def __init__(
        self,
        scenario: Scenario,
        aggregator: Aggregator = Aggregator.SUM,
        r_fail: float = DEFAULT_R_FAIL,
        layer_weights: dict[Layer, float] | None = None,
        log_trajectories: bool = False,
    ):
        self.scenario = scenario
        self.aggregator = aggregator
        self.r_fail = r_fail
        self.log_trajectories = log_trajectories
        self.trajectory_log: list[TrajectoryRow] = []

        n, k = len(scenario.nodes), scenario.k_max
        self.n_nodes = n
        self.k_max = k
        self.node_ids = [node.id for node in scenario.nodes]
        self._row_of = {node_id: i for i, node_id in enumerate(self.node_ids)}
        self._bob_row = self._row_of[scenario.bob]

        self._slot_exists = np.zeros((n, k), dtype=bool)
        self._slot_feasible = np.zeros((n, k), dtype=bool)
        self._slot_dst = np.full((n, k), -1, dtype=np.int64)
        self._slot_v = np.zeros((n, k))
        self._slot_h = np.zeros((n, k))
        self._slot_p = np.zeros((n, k))
        for i, node in enumerate(scenario.nodes):
            for slot, ch in enumerate(node.out_channels):
                self._slot_exists[i, slot] = True
                self._slot_feasible[i, slot] = covert_feasible(ch, scenario.tau)
                self._slot_dst[i, slot] = self._row_of[ch.dst]
                self._slot_v[i, slot] = ch.capacity_v
                p = layer_weighted_detection(ch, scenario, layer_weights)
                self._slot_p[i, slot] = p
                self._slot_h[i, slot] = channel_quality(ch, p)

        feas = self._slot_feasible
        if not feas.any():
            raise EnvContractError("scenario has no covert-feasible channel")
        self._v_max = float(self._slot_v[feas].max()) or 1.0
        self._h_max = float(self._slot_h[feas].max()) or 1.0

        self.state_dim = 3 * n + 4 * k
        self._episode = -1
        self._state: EnvState | None = None
        self._visited = np.zeros(n, dtype=bool)
        self._min_h = float("inf")

    # -- episode protocol --------------------------------------------------

    def reset(self, episode_seed: int | None = None) -> tuple[EnvState, np.ndarray]:
        """Start a fresh episode at Alice.  Deterministic regardless of seed;
        the argument exists for interface symmetry with stochastic variants."""
        del episode_seed
        self._episode += 1
        self._visited[:] = False
        alice_row = self._row_of[self.scenario.alice]
        self._visited[alice_row] = True
        self._current_row = alice_row
        self._min_h = float("inf")
        self._state = EnvState(
            current=self.scenario.alice,
            visited=tuple(self._visited.tolist()),
            steps=0,
            done=False,
            last_reward=0.0,
        )
        return self._state, self.encode()

    def action_mask(self, state: EnvState | None = None) -> np.ndarray:
        """Boolean vector over slots: exists, covert-feasible, unvisited dst."""
        if state is None:
            state = self._require_state()
            row = self._current_row
            visited = self._visited
        else:
            row = self._row_of[state.current]
            visited = np.asarray(state.visited, dtype=bool)
        if state.done:
            raise EnvContractError("action_mask called on a finished episode")
        mask = self._slot_feasible[row].copy()
        dst = self._slot_dst[row]
        mask[mask] &= ~visited[dst[mask]]
        return mask

    def step(self, action: int) -> tuple[EnvState, np.ndarray, float, bool, dict]:
        """Take a slot at the current node.

        A masked or out-of-range action never silently executes: the episode
        ends with the failure penalty and info["violation"] set.
        """
        state = self._require_state()
        if state.done:
            raise EnvContractError("step called on a finished episode")

        mask = self.action_mask()
        if not (0 <= action < self.k_max) or not mask[action]:
            return self._finish(
                reward=self.r_fail, success=False, violation=True, slot=int(action)
            )

        row = self._current_row
        dst_row = int(self._slot_dst[row, action])
        h = float(self._slot_h[row, action])
        p_detect = float(self._slot_p[row, action])
        self._min_h = min(self._min_h, h)
        self._visited[dst_row] = True
        self._current_row = dst_row
        steps = state.steps + 1

        success = dst_row == self._bob_row
        sum_mode = self.aggregator is Aggregator.SUM
        reward = h if sum_mode else 0.0

        if success:
            if not sum_mode:
                reward = self._min_h
            return self._finish(
                reward=reward, success=True, violation=False, slot=action, p_detect=p_detect
            )

        dead_end = not self._has_open_move(dst_row)
        out_of_steps = steps >= self.n_nodes - 1
        if dead_end or out_of_steps:
            reward = reward + self.r_fail if sum_mode else self.r_fail
            return self._finish(
                reward=reward, success=False, violation=False, slot=action, p_detect=p_detect
            )

        self._state = EnvState(
            current=self.node_ids[dst_row],
            visited=tuple(self._visited.tolist()),
            steps=steps,
            done=False,
            last_reward=reward,
        )
        self._log(state.current, action, self.node_ids[dst_row], reward, False, False)
        return self._state, self.encode(), reward, False, {
            "success": False,
            "violation": False,
            "dead_end": False,
            "p_detect": p_detect,
        }

    # -- encoding ------------------------------------------------------------

    def encode(self, state: EnvState | None = None) -> np.ndarray:
        """Fixed-size vector: current one-hot, bob one-hot, visited mask, then
        [exists, selectable, V/V_max, h/h_max] per slot of the current node."""
        if state is None:
            state = self._require_state()
            row = self._current_row
            visited = self._visited
        else:
            row = self._row_of[state.current]
            visited = np.asarray(state.visited, dtype=float)
        n, k = self.n_nodes, self.k_max
        vec = np.zeros(self.state_dim)
        vec[row] = 1.0
        vec[n + self._bob_row] = 1.0
        vec[2 * n : 3 * n] = visited

        base = 3 * n
        exists = self._slot_exists[row]
        vec[base : base + k][exists] = 1.0
        selectable = self._slot_feasible[row].copy()
        dst = self._slot_dst[row]
        vis_bool = np.asarray(visited, dtype=bool)
        selectable[selectable] &= ~vis_bool[dst[selectable]]
        vec[base + k : base + 2 * k][selectable] = 1.0
        vec[base + 2 * k : base + 3 * k][exists] = np.minimum(
            self._slot_v[row][exists] / self._v_max, 1.0
        )
        vec[base + 3 * k : base + 4 * k][exists] = np.minimum(
            self._slot_h[row][exists] / self._h_max, 1.0
        )
        return vec

    # -- internals -----------------------------------------------------------

    def _require_state(self) -> EnvState:
        if self._state is None:
            raise EnvContractError("reset must be called before use")
        return self._state

    def _has_open_move(self, row: int) -> bool:
        feas = self._slot_feasible[row]
        if not feas.any():
            return False
        dst = self._slot_dst[row][feas]
        return bool((~self._visited[dst]).any())

    def _finish(
        self,
        reward: float,
        success: bool,
        violation: bool,
        slot: int,
        p_detect: float | None = None,
    ) -> tuple[EnvState, np.ndarray, float, bool, dict]:
        prev = self._require_state()
        steps = prev.steps if violation else prev.steps + 1
        node_to = prev.current if violation else self.node_ids[self._current_row]
        self._state = EnvState(
            current=node_to,
            visited=tuple(self._visited.tolist()),
            steps=steps,
            done=True,
            last_reward=reward,
        )
        if not violation:
            self._log(prev.current, slot, node_to, reward, True, success)
        info = {
            "success": success,
            "violation": violation,
            "dead_end": not success and not violation,
        }
        if p_detect is not None:
            info["p_detect"] = p_detect
        return self._state, self.encode(), reward, True, info

    def _log(self, node_from, slot, node_to, reward, done, success) -> None:
        if self.log_trajectories:
            self.trajectory_log.append(
                TrajectoryRow(
                    episode=self._episode,
                    step=self._state.steps,
                    node_from=node_from,
                    slot=slot,
                    node_to=node_to,
                    reward=reward,
                    done=done,
                    success=success,
                )
            )


TRAJECTORY_CSV_HEADER = "episode,step,node_from,slot,node_to,reward,done,success"


def trajectory_csv(rows: list[TrajectoryRow]) -> str:
    """Render a trajectory log in the documented CSV layout."""
    lines = [TRAJECTORY_CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.episode},{r.step},{r.node_from},{r.slot},{r.node_to},"
            f"{float(r.reward)!r},{int(r.done)},{int(r.success)}"
        )
    return "\n".join(lines) + "\n"


def verify_trajectories(
    rows: list[TrajectoryRow], scenario: Scenario
) -> tuple[int, int]:
    """Audit a trajectory log against the covert constraint and simplicity.

    Returns (covert_violations, revisit_violations); both must be zero for a
    well-behaved agent.
    """
    covert_violations = 0
    revisits = 0
    visited: set[int] = set()
    episode = None
    for row in rows:
        if row.episode != episode:
            episode = row.episode
            visited = {scenario.alice}
        ch = scenario.node(row.node_from).out_channels[row.slot]
        if not covert_feasible(ch, scenario.tau):
            covert_violations += 1
        if row.node_to in visited:
            revisits += 1
        visited.add(row.node_to)
    return covert_violations, revisits
