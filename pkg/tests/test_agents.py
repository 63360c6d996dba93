"""Learner tests: replay buffer, policies, updates, diffusion chain, training."""

import math

import numpy as np
import pytest

from covertpath.agents import (
    Agent,
    DiffusionActor,
    DiffusionConfig,
    DivergenceError,
    EvalPoint,
    ReplayBuffer,
    SacConfig,
    TrainReport,
    actor_loss_from_logits,
    evaluate,
    run_evaluation,
    train,
    train_report_csv,
)
from covertpath.env import CovertPathEnv
from covertpath.nn import (
    NonFiniteGradError,
    finite_difference_grad,
    forward,
    max_relative_error,
)
from covertpath.oracle import brute_force_optimum
from covertpath.scenario import GenConfig, generate


def small_scenario(seed=7):
    return generate(GenConfig(n_nodes=6, slots_per_node=(2, 5), n_wardens=2, seed=seed))


def make_agent(algo="sac", n_nodes=6, k_max=9, seed=0, **cfg_kwargs):
    cfg = SacConfig(**cfg_kwargs) if cfg_kwargs else SacConfig()
    return Agent(algo, n_nodes=n_nodes, k_max=k_max, cfg=cfg,
                 init_rng=np.random.default_rng(seed))


class TestReplayBuffer:
    def test_fifo_eviction(self):
        buf = ReplayBuffer(capacity=3, state_dim=2, k_max=2)
        for i in range(5):
            buf.add([i, i], 0, float(i), [i, i], [True, False], False)
        assert len(buf) == 3
        stored = sorted(buf.rewards.tolist())
        assert stored == [2.0, 3.0, 4.0]

    def test_sample_requires_enough_entries(self):
        buf = ReplayBuffer(capacity=10, state_dim=2, k_max=2)
        buf.add([0, 0], 0, 0.0, [0, 0], [True, True], False)
        with pytest.raises(ValueError):
            buf.sample(np.random.default_rng(0), 2)

    def test_sampling_close_to_uniform(self):
        n, draws = 100, 1_000_000
        buf = ReplayBuffer(capacity=n, state_dim=1, k_max=1)
        for i in range(n):
            buf.add([i], 0, float(i), [i], [True], False)
        rng = np.random.default_rng(3)
        counts = np.zeros(n)
        for _ in range(draws // n):
            batch = buf.sample(rng, n)
            idx = batch["rewards"].astype(int)
            counts += np.bincount(idx, minlength=n)
        expected = draws / n
        sigma = math.sqrt(draws * (1 / n) * (1 - 1 / n))
        assert np.abs(counts - expected).max() < 5 * sigma

    def test_batch_fields_aligned(self):
        buf = ReplayBuffer(capacity=10, state_dim=2, k_max=3)
        for i in range(10):
            buf.add([i, -i], i % 3, 10.0 * i, [i + 1, 0], [True, False, i % 2 == 0], i % 2)
        batch = buf.sample(np.random.default_rng(0), 6)
        for j in range(6):
            i = int(batch["states"][j][0])
            assert batch["actions"][j] == i % 3
            assert batch["rewards"][j] == 10.0 * i
            assert batch["dones"][j] == float(i % 2)


class TestPolicy:
    def test_fresh_actor_near_uniform_on_symmetric_state(self):
        agent = make_agent("sac")
        state = np.zeros(agent.state_dim)
        mask = np.array([True] * 4 + [False] * 5)
        probs = agent.policy_probs(state, mask, np.random.default_rng(0))[0]
        assert np.abs(probs[:4] - 0.25).max() < 0.1
        assert not probs[4:].any()

    def test_single_open_slot_gets_probability_one(self):
        agent = make_agent("sac")
        mask = np.zeros(9, dtype=bool)
        mask[3] = True
        probs = agent.policy_probs(np.zeros(agent.state_dim), mask, np.random.default_rng(0))[0]
        assert probs[3] == 1.0
        assert probs.sum() == pytest.approx(1.0, abs=1e-9)

    def test_distributions_always_normalized(self):
        for algo in ("sac", "dsac"):
            agent = make_agent(algo)
            rng = np.random.default_rng(1)
            states = rng.random((64, agent.state_dim))
            masks = rng.random((64, 9)) < 0.6
            masks[:, 0] = True
            probs = agent.policy_probs(states, masks, rng)
            assert np.abs(probs.sum(axis=1) - 1.0).max() <= 1e-9
            assert not probs[~masks].any()
            assert agent.policy_violations == 0

    def test_act_only_picks_open_slots(self):
        agent = make_agent("dsac")
        rng = np.random.default_rng(2)
        mask = np.array([False, True, False, True, False, False, False, False, False])
        for _ in range(50):
            assert agent.act(np.zeros(agent.state_dim), mask, rng) in (1, 3)


class TestActorLoss:
    def test_alpha_zero_reduces_to_negative_q(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((8, 5))
        masks = np.ones((8, 5), dtype=bool)
        q = rng.standard_normal((8, 5))
        loss, _dl, probs = actor_loss_from_logits(logits, masks, q, alpha=0.0)
        assert loss == pytest.approx(float(-(probs * q).sum(axis=1).mean()))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((4, 5))
        masks = rng.random((4, 5)) < 0.7
        masks[:, 2] = True
        q = rng.standard_normal((4, 5))
        loss, dl, _p = actor_loss_from_logits(logits, masks, q, alpha=0.37)
        h = 1e-6
        for i in range(4):
            for j in range(5):
                bumped = logits.copy()
                bumped[i, j] += h
                up, _d, _p2 = actor_loss_from_logits(bumped, masks, q, alpha=0.37)
                bumped[i, j] -= 2 * h
                dn, _d, _p2 = actor_loss_from_logits(bumped, masks, q, alpha=0.37)
                num = (up - dn) / (2 * h)
                assert num == pytest.approx(dl[i, j], abs=1e-6)

    def test_masked_logits_get_zero_gradient(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((3, 4))
        masks = np.array([[True, False, True, False]] * 3)
        q = rng.standard_normal((3, 4))
        _loss, dl, _p = actor_loss_from_logits(logits, masks, q, alpha=0.5)
        assert not dl[~masks].any()


class TestSacUpdate:
    def batch_from_env(self, scenario, n, gamma_zero_done=False):
        env = CovertPathEnv(scenario)
        buf = ReplayBuffer(512, env.state_dim, env.k_max)
        rng = np.random.default_rng(0)
        _state, vec = env.reset()
        while len(buf) < n:
            mask = env.action_mask()
            a = int(rng.choice(np.flatnonzero(mask)))
            _state, nvec, r, done, _info = env.step(a)
            nmask = np.zeros(env.k_max, dtype=bool) if done else env.action_mask()
            if gamma_zero_done:
                buf.add(vec, a, 1.0, nvec, nmask, True)
            else:
                buf.add(vec, a, r, nvec, nmask, done)
            if done:
                _state, vec = env.reset()
            else:
                vec = nvec
        return buf

    def test_gamma_zero_terminal_target_is_reward(self):
        s = small_scenario()
        agent = make_agent("sac", gamma=0.01, batch_size=32)
        # all rewards 1, all done: y must be exactly 1 for taken actions.
        buf = self.batch_from_env(s, 64, gamma_zero_done=True)
        batch = buf.sample(np.random.default_rng(1), 32)
        q1 = forward(agent.critic1, batch["states"].astype(np.float32))
        expected = float(
            ((q1[np.arange(32), batch["actions"]] - 1.0) ** 2).mean()
        )
        losses = agent.update(batch, np.random.default_rng(2))
        assert losses["critic1_loss"] == pytest.approx(expected, rel=1e-5)

    def test_losses_are_finite_and_reported(self):
        s = small_scenario()
        agent = make_agent("sac", batch_size=32)
        buf = self.batch_from_env(s, 64)
        losses = agent.update(buf.sample(np.random.default_rng(1), 32),
                              np.random.default_rng(2))
        for key in ("critic1_loss", "critic2_loss", "actor_loss", "alpha", "entropy"):
            assert math.isfinite(losses[key]), key

    def test_update_moves_polyak_targets(self):
        s = small_scenario()
        agent = make_agent("sac", batch_size=32)
        buf = self.batch_from_env(s, 64)
        before = np.abs(agent.target1.flat - agent.critic1.flat).max()
        agent.update(buf.sample(np.random.default_rng(1), 32), np.random.default_rng(2))
        # After the critic step the target lags, but the polyak pull happened.
        assert not np.array_equal(agent.target1.flat, agent.critic1.flat)
        gap = np.abs(agent.target1.flat - agent.critic1.flat).max()
        assert math.isfinite(gap)

    def test_alpha_rises_when_entropy_below_target(self):
        agent = make_agent("sac", c_ent=1.0)  # target = ln(9), unreachably high
        s = small_scenario()
        buf = self.batch_from_env(s, 64)
        rng = np.random.default_rng(3)
        a0 = agent.alpha
        for _ in range(20):
            agent.update(buf.sample(rng, 256 if len(buf) >= 256 else len(buf)), rng)
        assert agent.alpha > a0


class TestDiffusionChain:
    def make_actor(self, seed=0, steps=5, k=4, state_dim=6, zero=False, **kw):
        dcfg = DiffusionConfig(steps=steps, hidden=(12, 12), **kw)
        actor = DiffusionActor(state_dim, k, dcfg, np.random.default_rng(seed), lr=1e-3)
        if zero:
            actor.params.flat[...] = 0.0
        return actor

    def test_zero_denoiser_is_affine_in_noise(self):
        actor = self.make_actor(zero=True)
        rng = np.random.default_rng(5)
        states = rng.random((3, 6))
        noise = actor.draw_noise(np.random.default_rng(11), 3)
        x0_a = actor.denoise(states, [n.copy() for n in noise])
        x0_b = actor.denoise(states, [n.copy() for n in noise])
        assert np.array_equal(x0_a, x0_b)
        # With eps == 0 the chain is affine: x0 = xT / prod(sqrt(1-beta)) + noise terms.
        scale = np.prod(np.sqrt(1.0 - actor.betas))
        manual = noise[0] / scale
        for i, t in enumerate(range(actor.dcfg.steps, 1, -1)):
            beta = actor.betas[t - 1]
            run = np.prod(np.sqrt(1.0 - actor.betas[: t - 1]))
            manual += math.sqrt(beta) * noise[i + 1] / run
        assert np.allclose(x0_a, manual, atol=1e-12)

    def test_single_step_closed_form(self):
        actor = self.make_actor(steps=1, zero=True)
        states = np.zeros((2, 6))
        noise = actor.draw_noise(np.random.default_rng(0), 2)
        x0 = actor.denoise(states, noise)
        assert np.allclose(x0, noise[0] / math.sqrt(1.0 - actor.betas[0]), atol=1e-12)

    def test_beta_schedule_invariants(self):
        dcfg = DiffusionConfig(steps=5)
        betas = dcfg.betas()
        a_bars = dcfg.alpha_bars()
        assert (betas > 0).all() and (betas < 1).all()
        assert (np.diff(betas) >= 0).all()
        assert (np.diff(a_bars) < 0).all()
        with pytest.raises(ValueError):
            DiffusionConfig(steps=0).betas()
        with pytest.raises(ValueError):
            DiffusionConfig(beta_lo=0.5, beta_hi=1.5).betas()

    def test_chain_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        actor = self.make_actor(seed=3, steps=5)
        states = rng.random((3, 6))
        noise = actor.draw_noise(rng, 3)
        w = rng.standard_normal((3, 4))

        def loss():
            return float((actor.denoise(states, noise) * w).sum())

        x0, cache = actor.denoise(states, noise, with_cache=True)
        analytic = actor.chain_grads(cache, w)
        numeric = finite_difference_grad(loss, actor.params, h=1e-5)
        assert max_relative_error(analytic.flat, numeric) < 1e-3

    def test_non_finite_chain_reports_step(self):
        actor = self.make_actor()
        actor.params.flat[...] = np.nan
        states = np.zeros((1, 6))
        noise = actor.draw_noise(np.random.default_rng(0), 1)
        with pytest.raises(NonFiniteGradError, match="t="):
            actor.denoise(states, noise)


class TestDegenerateChainEquivalence:
    def test_dsac_actor_loss_equals_sac_loss_on_identical_logits(self):
        # With T=1 and beta -> 0 the chain output is (essentially) its input
        # noise; both algorithms then apply the same loss to the same logits.
        rng = np.random.default_rng(0)
        dcfg = DiffusionConfig(steps=1, beta_lo=1e-12, beta_hi=1e-12, hidden=(8, 8))
        actor = DiffusionActor(6, 4, dcfg, rng, lr=0.0)
        actor.params.flat[...] = 0.0
        states = rng.random((5, 6))
        noise = actor.draw_noise(rng, 5)
        logits = actor.denoise(states, noise)
        assert np.allclose(logits, noise[0], atol=1e-9)

        masks = np.ones((5, 4), dtype=bool)
        q = rng.standard_normal((5, 4))
        dsac_loss, _dl, _p = actor_loss_from_logits(logits, masks, q, alpha=0.3)
        sac_loss, _dl2, _p2 = actor_loss_from_logits(noise[0], masks, q, alpha=0.3)
        assert dsac_loss == pytest.approx(sac_loss, abs=1e-9)


class TestTraining:
    def test_fast_sac_run_improves_over_random(self):
        s = small_scenario()
        opt = brute_force_optimum(s).selection.report.aggregate
        report = train(s, "sac", run_seed=1, n_steps=3000, eval_every=500,
                       eval_episodes=10)
        assert report.final_eval_return >= 0.7 * opt
        assert report.policy_violations == 0
        assert report.env_violations == 0

    def test_fast_dsac_run_improves_over_random(self):
        s = small_scenario()
        opt = brute_force_optimum(s).selection.report.aggregate
        report = train(s, "dsac", run_seed=1, n_steps=3000, eval_every=500,
                       eval_episodes=10)
        assert report.final_eval_return >= 0.7 * opt
        assert report.policy_violations == 0

    def test_deterministic_given_seed(self):
        s = small_scenario()
        a = train(s, "sac", run_seed=5, n_steps=1500, eval_every=500, eval_episodes=5)
        b = train(s, "sac", run_seed=5, n_steps=1500, eval_every=500, eval_episodes=5)
        assert a.episodes == b.episodes
        assert [p.mean_return for p in a.evals] == [p.mean_return for p in b.evals]
        assert train_report_csv(a) == train_report_csv(b)

    def test_report_structure(self):
        s = small_scenario()
        report = train(s, "sac", run_seed=2, n_steps=1500, eval_every=500,
                       eval_episodes=5, log_trajectories=True)
        steps = [e[0] for e in report.episodes]
        assert steps == sorted(steps)
        assert report.evals[-1].step == report.env_steps_run
        assert report.best_checkpoint is not None
        assert report.final_checkpoint["meta"]["algo"] == "sac"
        assert report.covert_violations == 0
        assert report.revisit_violations == 0
        csv_text = train_report_csv(report)
        header = csv_text.splitlines()[0]
        assert header.split(",") == [
            "step", "episode", "episode_return", "success", "critic1_loss",
            "critic2_loss", "actor_loss", "alpha_ent", "eval_return",
            "eval_accuracy",
        ]

    def test_early_stop_on_sustained_return(self):
        s = small_scenario()
        report = train(s, "sac", run_seed=1, n_steps=30_000, eval_every=500,
                       eval_episodes=5, stop_at_return=0.0, stop_consecutive=2)
        assert report.stopped_early
        assert report.env_steps_run < 30_000

    def test_divergence_aborts_with_report(self, monkeypatch):
        s = small_scenario()

        def explode(self, batch, rng):
            raise NonFiniteGradError("boom")

        monkeypatch.setattr(Agent, "update", explode)
        with pytest.raises(DivergenceError) as err:
            train(s, "sac", run_seed=1, n_steps=3000, eval_every=1000)
        assert err.value.report.diverged
        assert err.value.report.env_steps_run > 0

    def test_first_sustained_step(self):
        report = TrainReport(algo="sac", run_seed=0, steps_budget=0)
        returns = [1.0, 5.0, 5.0, 2.0, 5.0, 5.0, 5.0]
        report.evals = [EvalPoint(1000 * (i + 1), r, 0.0, 1.0) for i, r in enumerate(returns)]
        assert report.first_sustained_step(4.0, consecutive=3) == 5000
        assert report.first_sustained_step(4.0, consecutive=2) == 2000
        assert report.first_sustained_step(6.0) is None


class TestEvaluate:
    def test_oracle_path_as_policy_matches_aggregate(self):
        s = small_scenario()
        sel = brute_force_optimum(s).selection
        slot_of = {ch.src: slot for ch, slot in zip(sel.channels, sel.slots)}
        n = len(s.nodes)

        def oracle_policy(vec, mask, rng):
            current = int(np.argmax(np.atleast_2d(vec)[0][:n]))
            probs = np.zeros((1, s.k_max))
            probs[0, slot_of[current]] = 1.0
            return probs

        env = CovertPathEnv(s)
        ev = run_evaluation(oracle_policy, env, n_episodes=5, rng=np.random.default_rng(0))
        assert ev.mean_return == pytest.approx(sel.report.aggregate, abs=1e-9)
        assert ev.success_rate == 1.0

    def test_random_policy_reports_cleanly(self):
        s = small_scenario()

        def random_policy(vec, mask, rng):
            m = np.atleast_2d(mask)[0].astype(float)
            return (m / m.sum())[None, :]

        env = CovertPathEnv(s)
        ev = run_evaluation(random_policy, env, n_episodes=20, rng=np.random.default_rng(1))
        assert 0.0 <= ev.success_rate <= 1.0
        assert ev.n_episodes == 20

    def test_checkpoint_round_trip_preserves_greedy_policy(self, tmp_path):
        s = small_scenario()
        report = train(s, "dsac", run_seed=3, n_steps=1200, eval_every=400,
                       eval_episodes=5)
        payload = report.best_checkpoint
        from covertpath.nn import load_checkpoint, save_checkpoint

        path = tmp_path / "ckpt.json"
        save_checkpoint(path, payload)
        restored = load_checkpoint(path)
        ev_a = evaluate(payload, s, n_episodes=5, seed=0)
        ev_b = evaluate(restored, s, n_episodes=5, seed=0)
        assert ev_a.mean_return == ev_b.mean_return
        assert ev_a.modal_path == ev_b.modal_path

    def test_dimension_mismatch_rejected(self):
        s = small_scenario()
        report = train(s, "sac", run_seed=1, n_steps=1200, eval_every=400, eval_episodes=5)
        other = generate(GenConfig(n_nodes=9, seed=1))
        with pytest.raises(ValueError, match="dimensions"):
            evaluate(report.best_checkpoint, other)
