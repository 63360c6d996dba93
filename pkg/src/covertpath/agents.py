"""Discrete Soft Actor-Critic and its diffusion-actor variant.

Both learners share the twin-critic / entropy-temperature machinery; they
differ only in how action logits are produced.  The SAC actor is a plain MLP;
the diffusion actor starts from Gaussian noise and runs a T-step conditional
denoising chain whose output logits feed the same masked softmax.  Gradients
flow through every denoising step (noise draws are constants, so the chain is
an ordinary differentiable function of the denoiser weights).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from covertpath.env import CovertPathEnv
from covertpath.model import Aggregator, Scenario
from covertpath.nn import (
    AdamState,
    MlpSpec,
    NonFiniteGradError,
    ParamSet,
    ScalarAdam,
    adam_step,
    backward,
    checkpoint_payload,
    forward,
    init_params,
    masked_softmax,
    payload_params,
    polyak_update,
    sinusoidal_embedding,
)

PROB_TOL = 1e-9


class DivergenceError(RuntimeError):
    """Training aborted after too many consecutive non-finite updates."""

    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class SacConfig:
    """Hyperparameters shared by both algorithms.

    Networks run in float32 by default (policy probabilities are always
    computed in float64); set dtype="float64" for gradient-check work.
    """

    gamma: float = 0.95
    polyak: float = 0.005
    batch_size: int = 256
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_alpha: float = 3e-4
    c_ent: float = 0.3
    init_alpha: float = 1.0
    warmup_steps: int = 1000
    updates_per_step: int = 1
    hidden: tuple[int, int] = (128, 128)
    buffer_capacity: int = 100_000
    dtype: str = "float32"

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if not 0.0 < self.polyak <= 1.0:
            raise ValueError("polyak must be in (0, 1]")
        if self.c_ent < 0.0:
            raise ValueError("c_ent must be nonnegative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


@dataclass(frozen=True)
class DiffusionConfig:
    """Denoising chain shape: step count, linear beta schedule, embeddings.

    eval_draws: greedy evaluation picks argmax of the noise-averaged policy
    (mean over this many chains); acting/training always uses single draws.
    """

    steps: int = 5
    beta_lo: float = 1e-2
    beta_hi: float = 2e-1
    temb_dim: int = 16
    hidden: tuple[int, int] = (128, 128)
    output_scale: float = 0.1
    eval_draws: int = 8

    def betas(self) -> np.ndarray:
        if self.steps < 1:
            raise ValueError("need at least one denoising step")
        betas = np.linspace(self.beta_lo, self.beta_hi, self.steps)
        if not ((betas > 0.0).all() and (betas < 1.0).all()):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if self.steps > 1 and not (np.diff(betas) >= 0.0).all():
            raise ValueError("beta schedule must be ascending")
        return betas

    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas())


class ReplayBuffer:
    """Fixed-capacity FIFO transition store with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, k_max: int, dtype=np.float64):
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim), dtype=dtype)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim), dtype=dtype)
        self.next_masks = np.zeros((capacity, k_max), dtype=bool)
        self.dones = np.zeros(capacity)
        self._write = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, state, action, reward, next_state, next_mask, done) -> None:
        i = self._write
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.next_masks[i] = next_mask
        self.dones[i] = float(done)
        self._write = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch_size: int) -> dict:
        if self._size < batch_size:
            raise ValueError(
                f"buffer holds {self._size} transitions, need {batch_size}"
            )
        idx = rng.integers(0, self._size, size=batch_size)
        return {
            "states": self.states[idx],
            "actions": self.actions[idx],
            "rewards": self.rewards[idx],
            "next_states": self.next_states[idx],
            "next_masks": self.next_masks[idx],
            "dones": self.dones[idx],
        }


def _log_clipped(p: np.ndarray) -> np.ndarray:
    # p * log(p) must be exactly 0 where p == 0; the clip keeps log finite.
    return np.log(np.maximum(p, 1e-300))


def actor_loss_from_logits(
    logits: np.ndarray, masks: np.ndarray, q_min: np.ndarray, alpha: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Soft policy-improvement loss and its exact gradient w.r.t. the logits.

    Loss per state: sum_a pi(a)[alpha log pi(a) - minQ(a)].  Used unchanged by
    both algorithms, so the diffusion actor differs only in how the logits
    (and their parameter gradients) are produced.

    Returns (loss, dLoss/dlogits scaled for the batch mean, probs).
    """
    probs = masked_softmax(logits, masks)
    logp = _log_clipped(probs)
    gain = alpha * logp - q_min
    rows = (probs * gain).sum(axis=1)
    dlogits = probs * (gain - rows[:, None]) / logits.shape[0]
    return float(rows.mean()), dlogits, probs


class MlpActor:
    """Plain logit network: state -> k_max action logits."""

    kind = "mlp"

    def __init__(self, state_dim: int, k_max: int, hidden, rng, lr: float, dtype=np.float64):
        self.spec = MlpSpec((state_dim, *hidden, k_max))
        self.params = init_params(self.spec, rng, dtype=dtype)
        self.adam = AdamState.for_params(self.params, lr)

    def logits(self, states: np.ndarray, rng=None) -> np.ndarray:
        return forward(self.params, states)

    def logits_with_cache(self, states: np.ndarray, rng=None):
        return forward(self.params, states, with_cache=True)

    def apply_logit_grad(self, cache, dlogits: np.ndarray) -> None:
        grads, _ = backward(self.params, cache, dlogits)
        adam_step(self.params, grads, self.adam)

    def checkpoint_params(self) -> dict[str, ParamSet]:
        return {"actor": self.params}

    @property
    def param_count(self) -> int:
        return self.spec.param_count


class DiffusionActor:
    """Conditional denoiser: Gaussian noise -> T reverse steps -> logits.

    The denoiser MLP sees [state, noisy logits, timestep embedding] and
    predicts the noise to remove.  Per-sample noise draws are recorded and
    treated as constants, so backward is plain reverse-mode through the
    unrolled chain.
    """

    kind = "diffusion"

    def __init__(
        self,
        state_dim: int,
        k_max: int,
        dcfg: DiffusionConfig,
        rng,
        lr: float,
        dtype=np.float64,
    ):
        self.state_dim = state_dim
        self.k_max = k_max
        self.dcfg = dcfg
        self.dtype = np.dtype(dtype)
        self.betas = dcfg.betas()
        self.alpha_bars = dcfg.alpha_bars()
        in_dim = state_dim + k_max + dcfg.temb_dim
        self.spec = MlpSpec((in_dim, *dcfg.hidden, k_max))
        self.params = init_params(
            self.spec, rng, output_scale=dcfg.output_scale, dtype=dtype
        )
        self.adam = AdamState.for_params(self.params, lr)
        # t is 1-based; row 0 is unused padding.
        self._temb = np.stack(
            [np.zeros(dcfg.temb_dim)]
            + [sinusoidal_embedding(t, dcfg.temb_dim) for t in range(1, dcfg.steps + 1)]
        ).astype(self.dtype)

    def draw_noise(self, rng: np.random.Generator, batch: int) -> list[np.ndarray]:
        """x_T plus the injected z for every reverse step except the last."""
        return [
            rng.standard_normal((batch, self.k_max)).astype(self.dtype)
            for _ in range(self.dcfg.steps)
        ]

    def denoise(
        self,
        states: np.ndarray,
        noise: list[np.ndarray],
        with_cache: bool = False,
    ):
        """Run the reverse chain; returns final logits x_0 (and the caches
        backward needs).  Raises on non-finite intermediates, naming the step."""
        steps = self.dcfg.steps
        states = np.asarray(states, dtype=self.dtype)
        x = noise[0]
        cache = []
        for i, t in enumerate(range(steps, 0, -1)):
            beta = self.betas[t - 1]
            a_bar = self.alpha_bars[t - 1]
            inp = np.concatenate(
                [states, x, np.broadcast_to(self._temb[t], (x.shape[0], self.dcfg.temb_dim))],
                axis=1,
            )
            eps, mlp_cache = forward(self.params, inp, with_cache=True)
            x = (x - beta / math.sqrt(1.0 - a_bar) * eps) / math.sqrt(1.0 - beta)
            if t > 1:
                x = x + math.sqrt(beta) * noise[i + 1]
            if not np.isfinite(x).all():
                raise NonFiniteGradError(f"non-finite denoised logits at step t={t}")
            if with_cache:
                cache.append((t, mlp_cache))
        if with_cache:
            return x, cache
        return x

    def logits(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.denoise(states, self.draw_noise(rng, states.shape[0]))

    def logits_with_cache(self, states: np.ndarray, rng: np.random.Generator):
        return self.denoise(
            states, self.draw_noise(rng, states.shape[0]), with_cache=True
        )

    def chain_grads(self, cache, dlogits: np.ndarray) -> ParamSet:
        """Backpropagate dLoss/dx_0 through all T denoising steps."""
        grads = ParamSet(self.spec)
        g = dlogits
        lo, hi = self.state_dim, self.state_dim + self.k_max
        for t, mlp_cache in reversed(cache):
            beta = self.betas[t - 1]
            a_bar = self.alpha_bars[t - 1]
            scale = math.sqrt(1.0 - beta)
            g_eps = -(beta / math.sqrt(1.0 - a_bar) / scale) * g
            step_grads, g_inp = backward(self.params, mlp_cache, g_eps)
            grads.flat += step_grads.flat
            g = g / scale + g_inp[:, lo:hi]
        return grads

    def apply_logit_grad(self, cache, dlogits: np.ndarray) -> None:
        adam_step(self.params, self.chain_grads(cache, dlogits), self.adam)

    def checkpoint_params(self) -> dict[str, ParamSet]:
        return {"actor": self.params}

    @property
    def param_count(self) -> int:
        return self.spec.param_count


class Agent:
    """Twin-critic soft actor-critic with a pluggable (MLP or diffusion) actor."""

    def __init__(
        self,
        algo: str,
        n_nodes: int,
        k_max: int,
        cfg: SacConfig | None = None,
        dcfg: DiffusionConfig | None = None,
        init_rng: np.random.Generator | None = None,
    ):
        if algo not in ("sac", "dsac"):
            raise ValueError(f"unknown algorithm {algo!r}")
        self.algo = algo
        self.cfg = cfg or SacConfig()
        self.cfg.validate()
        self.dcfg = dcfg or DiffusionConfig()
        self.n_nodes = n_nodes
        self.k_max = k_max
        self.state_dim = 3 * n_nodes + 4 * k_max
        self.dtype = np.dtype(self.cfg.dtype)
        rng = init_rng or np.random.default_rng(0)

        if algo == "sac":
            self.actor = MlpActor(
                self.state_dim, k_max, self.cfg.hidden, rng, self.cfg.lr_actor,
                dtype=self.dtype,
            )
        else:
            self.actor = DiffusionActor(
                self.state_dim, k_max, self.dcfg, rng, self.cfg.lr_actor,
                dtype=self.dtype,
            )

        critic_spec = MlpSpec((self.state_dim, *self.cfg.hidden, k_max))
        self.critic1 = init_params(critic_spec, rng, dtype=self.dtype)
        self.critic2 = init_params(critic_spec, rng, dtype=self.dtype)
        self.target1 = self.critic1.copy()
        self.target2 = self.critic2.copy()
        self.adam_c1 = AdamState.for_params(self.critic1, self.cfg.lr_critic)
        self.adam_c2 = AdamState.for_params(self.critic2, self.cfg.lr_critic)

        self.log_alpha = math.log(self.cfg.init_alpha)
        self.alpha_adam = ScalarAdam(lr=self.cfg.lr_alpha)
        self.target_entropy = self.cfg.c_ent * math.log(k_max)

        # The "selectable" block of the state encoding is the action mask.
        self._mask_slice = slice(3 * n_nodes + k_max, 3 * n_nodes + 2 * k_max)

        self.policy_checks = 0
        self.policy_violations = 0

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    # -- policy -----------------------------------------------------------

    def policy_probs(
        self, states: np.ndarray, masks: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray:
        """Masked categorical distribution over slots for a batch of states.

        Probabilities are always float64 regardless of the network dtype."""
        states = np.atleast_2d(np.asarray(states, dtype=self.dtype))
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        probs = masked_softmax(self.actor.logits(states, rng), masks)
        self._validate_probs(probs, masks)
        return probs

    def _validate_probs(self, probs: np.ndarray, masks: np.ndarray) -> None:
        self.policy_checks += probs.shape[0]
        masked_ok = not probs[~masks].any()
        sums_ok = np.abs(probs.sum(axis=1) - 1.0).max() <= PROB_TOL
        nonneg_ok = (probs >= 0.0).all()
        if not (masked_ok and sums_ok and nonneg_ok):
            self.policy_violations += probs.shape[0]

    def act(
        self, state: np.ndarray, mask: np.ndarray, rng: np.random.Generator
    ) -> int:
        """Sample a slot from the stochastic policy (never a masked one)."""
        probs = self.policy_probs(state, mask, rng)[0]
        open_slots = np.flatnonzero(np.asarray(mask, dtype=bool))
        cum = np.cumsum(probs[open_slots])
        i = np.searchsorted(cum, rng.random() * cum[-1], side="right")
        return int(open_slots[min(i, open_slots.size - 1)])

    def eval_probs(
        self, states: np.ndarray, masks: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray:
        """Policy for greedy evaluation: the diffusion actor's distribution is
        averaged over eval_draws chains so argmax does not flip with single
        noise draws; the MLP actor is noise-free already."""
        if self.algo == "sac":
            return self.policy_probs(states, masks, rng)
        draws = max(1, self.dcfg.eval_draws)
        total = self.policy_probs(states, masks, rng)
        for _ in range(draws - 1):
            total = total + self.policy_probs(states, masks, rng)
        return total / draws

    def greedy_action(
        self, state: np.ndarray, mask: np.ndarray, rng: np.random.Generator
    ) -> int:
        return int(np.argmax(self.eval_probs(state, mask, rng)[0]))

    # -- learning -----------------------------------------------------------

    def update(self, batch: dict, rng: np.random.Generator) -> dict:
        """One gradient step on both critics, the actor, and the temperature."""
        cfg = self.cfg
        s = batch["states"]
        a = batch["actions"]
        r = batch["rewards"]
        s2 = batch["next_states"]
        m2 = batch["next_masks"]
        done = batch["dones"]
        bsz = s.shape[0]
        alpha = self.alpha

        # Soft Bellman target from the target critics and the current policy.
        next_v = np.zeros(bsz)
        live = np.flatnonzero(done == 0.0)
        if live.size:
            s2_live, m2_live = s2[live], m2[live]
            p2 = self.policy_probs(s2_live, m2_live, rng)
            logp2 = _log_clipped(p2)
            q_t = np.minimum(forward(self.target1, s2_live), forward(self.target2, s2_live))
            next_v[live] = (p2 * (q_t - alpha * logp2)).sum(axis=1)
        y = r + cfg.gamma * next_v

        rows = np.arange(bsz)
        q1, cache1 = forward(self.critic1, s, with_cache=True)
        q2, cache2 = forward(self.critic2, s, with_cache=True)
        # The actor improves against the pre-step critic values (detached).
        q_min = np.minimum(q1, q2).astype(np.float64)

        td1 = q1[rows, a] - y
        dq1 = np.zeros_like(q1)
        dq1[rows, a] = 2.0 * td1 / bsz
        g1, _ = backward(self.critic1, cache1, dq1)
        adam_step(self.critic1, g1, self.adam_c1)

        td2 = q2[rows, a] - y
        dq2 = np.zeros_like(q2)
        dq2[rows, a] = 2.0 * td2 / bsz
        g2, _ = backward(self.critic2, cache2, dq2)
        adam_step(self.critic2, g2, self.adam_c2)

        masks = s[:, self._mask_slice] > 0.5
        logits, actor_cache = self.actor.logits_with_cache(s, rng)
        actor_loss, dlogits, probs = actor_loss_from_logits(
            logits, masks, q_min, alpha
        )
        self._validate_probs(probs, masks)
        self.actor.apply_logit_grad(actor_cache, dlogits)

        # Temperature follows the entropy gap.
        entropy = -(probs * _log_clipped(probs)).sum(axis=1)
        alpha_grad = float((entropy - self.target_entropy).mean())
        self.log_alpha = self.alpha_adam.update(self.log_alpha, alpha_grad)

        polyak_update(self.target1, self.critic1, cfg.polyak)
        polyak_update(self.target2, self.critic2, cfg.polyak)

        return {
            "critic1_loss": float((td1 * td1).mean()),
            "critic2_loss": float((td2 * td2).mean()),
            "actor_loss": actor_loss,
            "alpha": self.alpha,
            "entropy": float(entropy.mean()),
        }

    # -- checkpointing -----------------------------------------------------

    def checkpoint(self) -> dict:
        meta = {
            "algo": self.algo,
            "n_nodes": self.n_nodes,
            "k_max": self.k_max,
            "state_dim": self.state_dim,
            "actor_param_count": self.actor.param_count,
        }
        if self.algo == "dsac":
            meta["diffusion"] = {
                "steps": self.dcfg.steps,
                "beta_lo": self.dcfg.beta_lo,
                "beta_hi": self.dcfg.beta_hi,
                "temb_dim": self.dcfg.temb_dim,
                "hidden": list(self.dcfg.hidden),
                "output_scale": self.dcfg.output_scale,
                "eval_draws": self.dcfg.eval_draws,
            }
        return checkpoint_payload(
            {"actor": self.actor.checkpoint_params()["actor"].copy()},
            scalars={"log_alpha": self.log_alpha},
            meta=meta,
        )


class PolicyHandle:
    """Frozen greedy/stochastic policy rebuilt from a checkpoint payload."""

    def __init__(self, payload: dict):
        meta = payload["meta"]
        self.algo = meta["algo"]
        self.n_nodes = meta["n_nodes"]
        self.k_max = meta["k_max"]
        self.state_dim = meta["state_dim"]
        params = payload_params(payload)["actor"]
        self.eval_draws = 1
        if self.algo == "dsac":
            d = meta["diffusion"]
            dcfg = DiffusionConfig(
                steps=d["steps"],
                beta_lo=d["beta_lo"],
                beta_hi=d["beta_hi"],
                temb_dim=d["temb_dim"],
                hidden=tuple(d["hidden"]),
                output_scale=d["output_scale"],
                eval_draws=d.get("eval_draws", 8),
            )
            actor = DiffusionActor(
                self.state_dim, self.k_max, dcfg, np.random.default_rng(0), lr=0.0
            )
            actor.params = params
            self.actor = actor
            self.eval_draws = dcfg.eval_draws
        else:
            hidden = tuple(params.spec.layer_widths[1:-1])
            actor = MlpActor(
                self.state_dim, self.k_max, hidden, np.random.default_rng(0), lr=0.0
            )
            actor.params = params
            self.actor = actor

    def probs(self, state, mask, rng) -> np.ndarray:
        """Noise-averaged policy, matching the training-time greedy protocol."""
        states = np.atleast_2d(np.asarray(state, dtype=np.float64))
        masks = np.atleast_2d(np.asarray(mask, dtype=bool))
        total = masked_softmax(self.actor.logits(states, rng), masks)
        for _ in range(self.eval_draws - 1):
            total = total + masked_softmax(self.actor.logits(states, rng), masks)
        return total / self.eval_draws

    def greedy_action(self, state, mask, rng) -> int:
        return int(np.argmax(self.probs(state, mask, rng)[0]))


# --- training loop -------------------------------------------------------


@dataclass
class EvalPoint:
    step: int
    mean_return: float
    mean_accuracy: float
    success_rate: float


@dataclass
class EvalReport:
    """Greedy evaluation summary for a frozen policy."""

    mean_return: float
    success_rate: float
    mean_accuracy: float
    modal_path: tuple
    n_episodes: int
    returns: list[float] = field(default_factory=list)


@dataclass
class TrainReport:
    """Everything a run produced: traces, counters, and checkpoints."""

    algo: str
    run_seed: int
    steps_budget: int
    episodes: list = field(default_factory=list)  # (step, episode, return, success)
    updates: list = field(default_factory=list)  # (step, c1, c2, actor, alpha)
    evals: list[EvalPoint] = field(default_factory=list)
    best_checkpoint: dict | None = None
    best_eval_return: float = float("-inf")
    final_checkpoint: dict | None = None
    env_steps_run: int = 0
    policy_checks: int = 0
    policy_violations: int = 0
    env_violations: int = 0
    covert_violations: int = 0
    revisit_violations: int = 0
    diverged: bool = False
    stopped_early: bool = False

    @property
    def final_eval_return(self) -> float:
        return self.evals[-1].mean_return if self.evals else float("nan")

    def first_sustained_step(self, threshold: float, consecutive: int = 3) -> int | None:
        """Env step at which the eval return first stays >= threshold for the
        given number of consecutive evaluations (the step of the streak's
        first eval); None if never sustained."""
        streak = 0
        for i, point in enumerate(self.evals):
            streak = streak + 1 if point.mean_return >= threshold else 0
            if streak >= consecutive:
                return self.evals[i - consecutive + 1].step
        return None


def _greedy_episode(env: CovertPathEnv, policy_probs, rng) -> tuple[float, bool, list, list]:
    """Roll one greedy episode; returns (return, success, path, accuracies)."""
    state, vec = env.reset()
    total = 0.0
    path = []
    accuracies = []
    success = False
    while True:
        mask = env.action_mask()
        probs = policy_probs(vec, mask, rng)
        action = int(np.argmax(probs[0]))
        path.append((state.current, action))
        state, vec, reward, done, info = env.step(action)
        total += reward
        if "p_detect" in info:
            accuracies.append(1.0 - info["p_detect"])
        if done:
            success = info["success"]
            break
    return total, success, path, accuracies


def run_evaluation(
    policy_probs, env: CovertPathEnv, n_episodes: int, rng: np.random.Generator
) -> EvalReport:
    """Greedy rollouts of any policy callable (state_vec, mask, rng) -> probs."""
    returns = []
    accuracies = []
    successes = 0
    paths: Counter = Counter()
    for _ in range(n_episodes):
        total, success, path, accs = _greedy_episode(env, policy_probs, rng)
        returns.append(total)
        successes += int(success)
        accuracies.extend(accs)
        paths[tuple(path)] += 1
    modal_path = min(
        (p for p, c in paths.items() if c == max(paths.values())), default=()
    )
    return EvalReport(
        mean_return=float(np.mean(returns)),
        success_rate=successes / n_episodes,
        mean_accuracy=float(np.mean(accuracies)) if accuracies else 0.0,
        modal_path=modal_path,
        n_episodes=n_episodes,
        returns=returns,
    )


def evaluate(
    checkpoint: dict,
    scenario: Scenario,
    n_episodes: int = 20,
    seed: int = 0,
    aggregator: Aggregator = Aggregator.SUM,
) -> EvalReport:
    """Greedy evaluation of a saved policy on a scenario."""
    handle = PolicyHandle(checkpoint)
    env = CovertPathEnv(scenario, aggregator=aggregator)
    if env.state_dim != handle.state_dim or env.k_max != handle.k_max:
        raise ValueError(
            f"checkpoint dimensions (state {handle.state_dim}, k {handle.k_max}) "
            f"do not match scenario (state {env.state_dim}, k {env.k_max})"
        )
    rng = np.random.default_rng(seed)
    return run_evaluation(handle.probs, env, n_episodes, rng)


MAX_CONSECUTIVE_BAD_UPDATES = 100


def train(
    scenario: Scenario,
    algo: str,
    run_seed: int,
    n_steps: int = 100_000,
    cfg: SacConfig | None = None,
    dcfg: DiffusionConfig | None = None,
    aggregator: Aggregator = Aggregator.SUM,
    r_fail: float = -5.0,
    eval_every: int = 1000,
    eval_episodes: int = 20,
    log_trajectories: bool = False,
    stop_at_return: float | None = None,
    stop_consecutive: int = 3,
) -> TrainReport:
    """Train one agent on one scenario, fully deterministic given run_seed.

    Exploration is the stochastic policy itself; evaluation is greedy and runs
    every eval_every env steps on a separate environment instance.  With
    stop_at_return set, training ends once that return is sustained for
    stop_consecutive consecutive evaluations.
    """
    from covertpath.nn import limit_blas_threads

    limit_blas_threads(1)
    cfg = cfg or SacConfig()
    seeds = np.random.SeedSequence(run_seed).spawn(4)
    init_rng, act_rng, update_rng, eval_rng = (np.random.default_rng(s) for s in seeds)

    env = CovertPathEnv(
        scenario, aggregator=aggregator, r_fail=r_fail, log_trajectories=log_trajectories
    )
    eval_env = CovertPathEnv(
        scenario, aggregator=aggregator, r_fail=r_fail, log_trajectories=log_trajectories
    )
    agent = Agent(
        algo,
        n_nodes=len(scenario.nodes),
        k_max=scenario.k_max,
        cfg=cfg,
        dcfg=dcfg,
        init_rng=init_rng,
    )
    buffer = ReplayBuffer(
        cfg.buffer_capacity, env.state_dim, env.k_max, dtype=agent.dtype
    )
    report = TrainReport(algo=algo, run_seed=run_seed, steps_budget=n_steps)

    def snapshot_eval(step: int) -> EvalPoint:
        ev = run_evaluation(
            lambda s, m, r: agent.eval_probs(s, m, r), eval_env, eval_episodes, eval_rng
        )
        point = EvalPoint(step, ev.mean_return, ev.mean_accuracy, ev.success_rate)
        report.evals.append(point)
        if ev.mean_return > report.best_eval_return:
            report.best_eval_return = ev.mean_return
            report.best_checkpoint = agent.checkpoint()
        return point

    episode = 0
    episode_return = 0.0
    _state, vec = env.reset()
    consecutive_bad = 0

    for step in range(1, n_steps + 1):
        mask = env.action_mask()
        action = agent.act(vec, mask, act_rng)
        _state, next_vec, reward, done, info = env.step(action)
        if info["violation"]:
            report.env_violations += 1
        if done:
            next_mask = np.zeros(env.k_max, dtype=bool)
        else:
            next_mask = env.action_mask()
        buffer.add(vec, action, reward, next_vec, next_mask, done)
        episode_return += reward
        report.env_steps_run = step

        if done:
            report.episodes.append((step, episode, episode_return, info["success"]))
            episode += 1
            episode_return = 0.0
            _state, vec = env.reset()
        else:
            vec = next_vec

        if step > cfg.warmup_steps and len(buffer) >= cfg.batch_size:
            for _ in range(cfg.updates_per_step):
                try:
                    losses = agent.update(buffer.sample(update_rng, cfg.batch_size), update_rng)
                except NonFiniteGradError:
                    consecutive_bad += 1
                    if consecutive_bad > MAX_CONSECUTIVE_BAD_UPDATES:
                        report.diverged = True
                        _collect_counters(report, agent, env, eval_env, scenario)
                        raise DivergenceError(
                            f"{consecutive_bad} consecutive non-finite updates "
                            f"at env step {step}",
                            report,
                        ) from None
                    continue
                consecutive_bad = 0
                report.updates.append(
                    (
                        step,
                        losses["critic1_loss"],
                        losses["critic2_loss"],
                        losses["actor_loss"],
                        losses["alpha"],
                    )
                )

        if step % eval_every == 0:
            snapshot_eval(step)
            if stop_at_return is not None and len(report.evals) >= stop_consecutive:
                recent = report.evals[-stop_consecutive:]
                if all(p.mean_return >= stop_at_return for p in recent):
                    report.stopped_early = True
                    break

    if not report.evals or report.evals[-1].step != report.env_steps_run:
        snapshot_eval(report.env_steps_run)

    report.final_checkpoint = agent.checkpoint()
    if report.best_checkpoint is None:
        report.best_checkpoint = report.final_checkpoint
    _collect_counters(report, agent, env, eval_env, scenario)
    return report


def _collect_counters(report, agent, env, eval_env, scenario) -> None:
    from covertpath.env import verify_trajectories

    report.policy_checks = agent.policy_checks
    report.policy_violations = agent.policy_violations
    if env.log_trajectories:
        for log_env in (env, eval_env):
            covert, revisit = verify_trajectories(log_env.trajectory_log, scenario)
            report.covert_violations += covert
            report.revisit_violations += revisit


# --- CSV emission -----------------------------------------------------------

TRAIN_CSV_HEADER = (
    "step,episode,episode_return,success,critic1_loss,critic2_loss,"
    "actor_loss,alpha_ent,eval_return,eval_accuracy"
)


def train_report_csv(report: TrainReport) -> str:
    """Chronological event rows: one per finished episode, one per evaluation.

    Unused fields stay empty; losses on an episode row are the most recent
    update's values at that point.
    """
    lines = [TRAIN_CSV_HEADER]
    updates = report.updates
    u = 0
    last_losses = ("", "", "", "")

    events = [("episode", e[0], e) for e in report.episodes]
    events += [("eval", p.step, p) for p in report.evals]
    events.sort(key=lambda item: (item[1], 0 if item[0] == "episode" else 1))

    for kind, step, payload in events:
        while u < len(updates) and updates[u][0] <= step:
            last_losses = tuple(repr(x) for x in updates[u][1:])
            u += 1
        c1, c2, al, alph = last_losses
        if kind == "episode":
            _step, episode, ret, success = payload
            lines.append(
                f"{step},{episode},{ret!r},{int(success)},{c1},{c2},{al},{alph},,"
            )
        else:
            lines.append(
                f"{step},,,,{c1},{c2},{al},{alph},{payload.mean_return!r},"
                f"{payload.mean_accuracy!r}"
            )
    return "\n".join(lines) + "\n"
