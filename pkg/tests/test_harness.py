import dataclasses

import numpy as np
import pytest

from mixmask import envs, harness
from mixmask.harness import (ExplorationSchedule, RunConfig, evaluate, is_solved,
                             run_episode, similarity_delta_experiment, train,
                             train_with_agent)
from mixmask.mechanisms import MechanismConfig
from mixmask.networks import ActorCritic, ArchitectureConfig


def tiny_arch(arch="separated", **mech_kw):
    mech = MechanismConfig(**mech_kw) if mech_kw else None
    return ArchitectureConfig(arch=arch, trunk_hidden=(8, 8), backbone_width=8,
                              head_hidden=8, mechanism=mech)


def tiny_config(arch="separated", **kw):
    defaults = dict(episodes=3, eval_interval=2, eval_trials=10,
                    calibration_samples=4)
    defaults.update(kw)
    return RunConfig(arch=tiny_arch(arch) if isinstance(arch, str) else arch, **defaults)


def make_agent(arch="separated", seed=0, **mech_kw):
    return ActorCritic(tiny_arch(arch, **mech_kw), np.random.default_rng(seed))


# -- exploration schedule -----------------------------------------------------

def test_epsilon_decay_arithmetic():
    sched = ExplorationSchedule(eps0=1.0, decay=0.99)
    sched.advance()
    sched.advance()
    assert np.isclose(sched.epsilon, 0.9801, atol=1e-12)


def test_epsilon_stays_in_unit_interval():
    sched = ExplorationSchedule(eps0=1.0, decay=0.9)
    for _ in range(200):
        assert 0.0 <= sched.epsilon <= 1.0
        sched.advance()


# -- run_episode --------------------------------------------------------------

def _forced_policy_agent(action=1):
    """Policy that all but surely picks `action` when sampled."""
    agent = make_agent()
    bias = agent.registry.get("policy.out.b")
    bias.data[:] = 0.0
    bias.data[action] = 50.0
    return agent


def test_epsilon_one_ignores_policy():
    agent = _forced_policy_agent(action=1)
    sched = ExplorationSchedule(eps0=1.0, decay=1.0)
    traj = run_episode(agent, "cp", sched, np.random.default_rng(0))
    assert (traj.actions == 0).any()  # uniform exploration produces both actions


def test_epsilon_zero_follows_policy():
    agent = _forced_policy_agent(action=1)
    sched = ExplorationSchedule(eps0=0.0, decay=1.0)
    traj = run_episode(agent, "cp", sched, np.random.default_rng(0))
    assert (traj.actions == 1).all()


def test_schedule_advances_once_per_step():
    agent = make_agent()
    sched = ExplorationSchedule(eps0=0.5, decay=0.9)
    traj = run_episode(agent, "cp", sched, np.random.default_rng(1))
    assert sched.t == len(traj.rewards)


def test_trajectory_single_terminal_at_end():
    agent = make_agent()
    sched = ExplorationSchedule(eps0=0.2, decay=1.0)
    traj = run_episode(agent, "cp", sched, np.random.default_rng(2))
    assert traj.dones.sum() == 1
    assert traj.dones[-1]
    assert traj.states.shape == (len(traj.rewards), 4)
    assert len(traj.trace.policy_layers[0].data) == len(traj.rewards)


def test_run_episode_deterministic():
    def collect():
        agent = make_agent(seed=3)
        sched = ExplorationSchedule(eps0=0.3, decay=0.99)
        return run_episode(agent, "cp", sched, np.random.default_rng(7))

    a, b = collect(), collect()
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.actions, b.actions)
    assert np.array_equal(a.rewards, b.rewards)


def test_stochastic_rollout_records_noise():
    agent = make_agent("mix_ac", kind="mix", stochastic="diagonal",
                       penalty_measure="j_divergence")
    sched = ExplorationSchedule(eps0=0.1, decay=1.0)
    traj = run_episode(agent, "cp", sched, np.random.default_rng(4))
    eps_pi, eps_v = traj.mech_noise["mix"]
    assert eps_pi.shape == (len(traj.rewards), 8)
    assert eps_v.shape == (len(traj.rewards), 8)


# -- evaluate -----------------------------------------------------------------

def test_solved_rule_boundary():
    assert is_solved(495.0, 100)
    assert not is_solved(494.999, 100)
    assert is_solved(500.0, 100)
    assert not is_solved(500.0, 99)


def test_evaluate_surviving_agent_scores_500(monkeypatch):
    # forceless, gravity-free physics from a rest state: every trial
    # survives to the cap, so the return accounting must give exactly 500
    monkeypatch.setattr(envs, "CANONICAL_PARAMS",
                        envs.PhysicsParams(gravity=0.0, force_magnitude=0.0))
    monkeypatch.setattr(envs, "RESET_BOUND", 0.0)
    agent = make_agent()
    mean, solved = evaluate(agent, "cp", 100, np.random.default_rng(0))
    assert mean == 500.0 and solved


def test_evaluate_immediate_failure_scores_minus_one(monkeypatch):
    monkeypatch.setattr(envs, "POSITION_LIMIT", 0.0)
    agent = make_agent()
    mean, solved = evaluate(agent, "cp", 50, np.random.default_rng(0))
    assert mean == -1.0 and not solved


def test_evaluate_does_not_mutate_agent_or_schedule():
    agent = make_agent(seed=5)
    before = agent.state_copy()
    evaluate(agent, "cp", 20, np.random.default_rng(1))
    after = agent.state_copy()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_evaluate_requires_positive_trials():
    with pytest.raises(ValueError):
        evaluate(make_agent(), "cp", 0, np.random.default_rng(0))


# -- train --------------------------------------------------------------------

def _stats_equal(a, b):
    if (a.seed, a.config_hash, a.solved, a.episodes_run, a.aborted) != \
            (b.seed, b.config_hash, b.solved, b.episodes_run, b.aborted):
        return False
    if not (a.final_eval == b.final_eval or (np.isnan(a.final_eval) and np.isnan(b.final_eval))):
        return False
    if len(a.rows) != len(b.rows):
        return False
    for ra, rb in zip(a.rows, b.rows):
        da, db = dataclasses.asdict(ra), dataclasses.asdict(rb)
        if da != db:
            return False
    return True


def test_train_same_seed_bit_identical():
    cfg = tiny_config()
    s1 = train(cfg, seed=11)
    s2 = train(cfg, seed=11)
    assert _stats_equal(s1, s2)
    assert s1.rows[0].components == s2.rows[0].components


def test_train_zero_episodes_returns_untouched_stats():
    cfg = tiny_config(episodes=0)
    stats = train(cfg, seed=0)
    assert stats.rows == []
    assert stats.episodes_run == 0
    assert np.isfinite(stats.final_eval)
    assert not stats.solved


def test_train_stops_after_solved(monkeypatch):
    calls = {"n": 0}

    def fake_evaluate(agent, mode, n_trials, rng, ncp_ranges=None):
        calls["n"] += 1
        return 500.0, True

    monkeypatch.setattr(harness, "evaluate", fake_evaluate)
    cfg = tiny_config(episodes=10, eval_interval=2, eval_trials=100)
    stats = train(cfg, seed=1)
    assert stats.solved
    assert stats.episodes_run == 2  # stopped at the first evaluation point
    assert stats.rows[-1].solved


def test_train_records_losses_and_epsilon():
    cfg = tiny_config(arch=tiny_arch("mix_ac", kind="mix", alpha_s=0.3), episodes=2)
    stats = train(cfg, seed=2)
    row = stats.rows[0]
    assert {"j_pi", "j_v", "entropy", "alpha_s", "alpha_d", "penalty_mix"} <= set(row.components)
    assert row.epsilon == cfg.epsilon0
    assert stats.rows[1].epsilon < cfg.epsilon0


@pytest.mark.parametrize("mode", ["scalarize", "pcgrad", "both"])
def test_train_multiobjective_modes_run(mode):
    cfg = tiny_config(arch=tiny_arch("mask_ac", kind="mask", alpha_d=0.1),
                      episodes=2, multiobj_mode=mode)
    stats = train(cfg, seed=3)
    assert stats.aborted is None
    assert len(stats.rows) == 2
    assert all(np.isfinite(v) for row in stats.rows for v in row.components.values())


def test_train_contrastive_updates_momentum_copies():
    arch = tiny_arch("mask_ac", kind="mask", contrastive=True, alpha_d=0.5)
    cfg = tiny_config(arch=arch, episodes=2)
    result = train_with_agent(cfg, seed=4)
    agent = result.agent
    live = agent._mech_params("mask")
    mom = agent._mech_params("momentum.mask")
    diffs = [np.abs(a.data - b.data).max() for a, b in zip(live, mom)]
    assert max(diffs) > 0.0  # copies lag the live parameters after updates
    assert result.stats.aborted is None


def test_train_stochastic_variant_runs():
    arch = tiny_arch("mix_ac", kind="mix", stochastic="diagonal",
                     penalty_measure="info_radius", mc_samples=16)
    cfg = tiny_config(arch=arch, episodes=2)
    stats = train(cfg, seed=5)
    assert stats.aborted is None
    assert "penalty_mix" in stats.rows[0].components


def test_ncp_train_mode_uses_ncp_for_training():
    cfg = tiny_config(env_mode="ncp", ncp_mode="train")
    assert cfg.train_env_mode == "ncp"
    assert cfg.eval_env_mode == "ncp"
    cfg2 = tiny_config(env_mode="ncp", ncp_mode="eval_only")
    assert cfg2.train_env_mode == "cp"
    assert cfg2.eval_env_mode == "ncp"


def test_config_hash_distinguishes_configs():
    assert tiny_config().config_hash() != tiny_config(gamma=0.95).config_hash()
    assert tiny_config().config_hash() == tiny_config().config_hash()


# -- pcgrad routing inside the update ----------------------------------------

def test_pcgrad_leaves_disjoint_groups_bitwise_unchanged():
    from mixmask import autodiff as ad
    from mixmask.objectives import total_objective

    arch = tiny_arch("mask_ac", kind="mask", alpha_d=0.2)
    agent = ActorCritic(arch, np.random.default_rng(6))
    rng = np.random.default_rng(7)
    states = rng.uniform(-0.05, 0.05, (5, 4))
    actions = rng.integers(0, 2, 5)
    adv, rets = rng.standard_normal(5), rng.standard_normal(5)

    fwd = agent.forward_batch(states)
    bundle = total_objective(agent, fwd, actions, adv, rets, beta=0.01, step=0)
    agent.registry.zero_grad()
    ad.backward(bundle.main_pi)
    snap_pi = {n: t.grad.copy() if t.grad is not None else None
               for n, t in agent.registry.trainable()}
    agent.registry.zero_grad()
    ad.backward(bundle.main_v)
    snap_v = {n: t.grad.copy() if t.grad is not None else None
              for n, t in agent.registry.trainable()}
    agent.registry.zero_grad()
    ad.backward(bundle.extra)
    snap_extra = {n: t.grad.copy() if t.grad is not None else None
                  for n, t in agent.registry.trainable()}

    fwd2 = agent.forward_batch(states)
    bundle2 = total_objective(agent, fwd2, actions, adv, rets, beta=0.01, step=0)

    class NoopOpt:
        def zero_grad(self):
            agent.registry.zero_grad()

        def step(self):
            pass

    harness._apply_update(agent, NoopOpt(), bundle2, use_pcgrad=True)
    for name, t in agent.registry.group("policy") + agent.registry.group("value"):
        expected = np.zeros_like(t.data)
        for snap in (snap_pi, snap_v, snap_extra):
            if snap[name] is not None:
                expected = expected + snap[name]
        assert np.array_equal(t.grad, expected), name


# -- similarity experiment ----------------------------------------------------

def test_similarity_zero_training_gives_zero_deltas():
    cfg = tiny_config(episodes=0, eval_interval=0)
    res = similarity_delta_experiment(cfg, n_models=2, n_rollouts=2, seed=0)
    assert np.allclose(res.mean_deltas, 0.0)
    assert res.per_model.shape == (2, 2)


def test_similarity_single_sample_is_finite():
    cfg = tiny_config(episodes=1, eval_interval=0)
    res = similarity_delta_experiment(cfg, n_models=1, n_rollouts=1, seed=1)
    assert np.isfinite(res.mean_deltas).all()
    assert res.layer_names == ["hidden1", "hidden2"]


def test_similarity_shared_backbone_layer_names():
    cfg = tiny_config(arch=tiny_arch("shared_backbone"), episodes=0, eval_interval=0)
    res = similarity_delta_experiment(cfg, n_models=1, n_rollouts=1, seed=2)
    assert res.layer_names == ["backbone", "head_hidden"]
    # the backbone feeds both paths: its similarity is exactly 1 either way
    assert np.allclose(res.untrained_sims[:, 0], 1.0)
