"""Rollout collection, training loop, evaluation protocol, and the
layerwise similarity-delta measurement.

A training run is fully determined by (config, seed): every stochastic
consumer (init, rollouts, evaluation, calibration, Monte Carlo penalties)
draws from its own child of one seed sequence, in a fixed order.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import envs
from .autodiff import TRAINABLE_GROUPS
from .mechanisms import MechanismConfig
from .multiobj import calibrate, pcgrad
from .networks import ActorCritic, ArchitectureConfig, LatentTrace
from .objectives import a2c_loss, gae, mc_returns, normalize_advantages, total_objective
from .optim import Adam

log = logging.getLogger(__name__)

SOLVED_THRESHOLD = 495.0
SOLVED_TRIALS = 100


@dataclass
class ExplorationSchedule:
    """Exponentially decayed epsilon: eps_t = eps0 * decay^t, advanced once
    per environment step."""

    eps0: float = 0.3
    decay: float = 0.995
    t: int = 0

    @property
    def epsilon(self) -> float:
        return self.eps0 * self.decay ** self.t

    def advance(self) -> None:
        self.t += 1


@dataclass
class Trajectory:
    """One episode of transitions; exactly one terminal step, at the end."""

    states: np.ndarray  # (T, obs_dim)
    actions: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    dones: np.ndarray  # (T,)
    log_probs: np.ndarray  # (T,)
    values: np.ndarray  # (T,)
    trace: LatentTrace
    mech_noise: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())


@dataclass
class RunConfig:
    """Everything one training run needs; hashable to identify outputs."""

    arch: ArchitectureConfig
    env_mode: str = "cp"  # cp | ncp
    ncp_mode: str = "eval_only"  # eval_only (train on CP, test on nCP) | train
    ncp_ranges: envs.NcpRanges = field(default_factory=envs.NcpRanges)
    gamma: float = 0.99
    lam: float = 0.95
    entropy_coef: float = 0.01
    learning_rate: float = 1e-3
    value_lr: float | None = None
    epsilon0: float = 0.3
    epsilon_decay: float = 0.995
    episodes: int = 100
    eval_interval: int = 5
    eval_trials: int = 100
    normalize_adv: bool = True
    value_coef: float = 1.0  # weight of the value cost in the combined loss
    max_grad_norm: float | None = 0.5  # global-norm clip; None disables
    multiobj_mode: str = "none"  # none | scalarize | pcgrad | both
    z_score: float = 3.0
    calibration_samples: int = 100
    recalibrate_interval: int = 0  # 0 keeps the scalarizer stationary
    recalibrate_z: float = 1.0

    def __post_init__(self):
        if self.env_mode not in ("cp", "ncp"):
            raise ValueError(f"env_mode must be cp|ncp, got {self.env_mode!r}")
        if self.ncp_mode not in ("eval_only", "train"):
            raise ValueError(f"ncp_mode must be eval_only|train, got {self.ncp_mode!r}")
        if self.multiobj_mode not in ("none", "scalarize", "pcgrad", "both"):
            raise ValueError(f"unknown multiobj_mode: {self.multiobj_mode!r}")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.lam <= 1.0:
            raise ValueError("gamma and lam must lie in [0, 1]")

    @property
    def train_env_mode(self) -> str:
        if self.env_mode == "ncp" and self.ncp_mode == "train":
            return "ncp"
        return "cp"

    @property
    def eval_env_mode(self) -> str:
        return self.env_mode

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EpisodeRow:
    episode: int
    train_return: float
    steps: int
    epsilon: float
    components: dict[str, float]
    eval_return: float | None = None
    solved: bool = False


@dataclass
class TrainingStats:
    seed: int
    config_hash: str
    rows: list[EpisodeRow] = field(default_factory=list)
    solved: bool = False
    final_eval: float = float("nan")
    episodes_run: int = 0
    wall_clock: float = 0.0  # never written to CSV; runs stay byte-reproducible
    aborted: str | None = None


def run_episode(agent: ActorCritic, mode: str, schedule: ExplorationSchedule,
                rng: np.random.Generator,
                ncp_ranges: envs.NcpRanges | None = None) -> Trajectory:
    """Collect one episode with epsilon-greedy-over-policy action selection.

    With probability eps_t the action is uniform over {0, 1}; otherwise it
    is sampled from the policy. The schedule advances every step.
    """
    state, params = envs.reset(mode, rng, ncp_ranges)
    states, actions, rewards, dones, log_ps, values = [], [], [], [], [], []
    noise_steps: list[dict] = []
    done = False
    while not done:
        obs = state.observation()
        with ad.no_grad():
            out = agent.forward_batch(obs[None, :], mech_rng=rng)
        probs = out.probs.data[0]
        if rng.random() < schedule.epsilon:
            action = int(rng.integers(2))
        else:
            action = int(rng.random() >= probs[0])
        schedule.advance()
        next_state, reward, done = envs.step(state, params, action)
        states.append(obs)
        actions.append(action)
        rewards.append(reward)
        dones.append(done)
        log_ps.append(float(np.log(probs[action])))
        values.append(float(out.values.data[0]))
        noise_steps.append(out.mech_noise)
        state = next_state
    states_arr = np.asarray(states)
    mech_noise = {}
    if noise_steps and noise_steps[0]:
        for name in noise_steps[0]:
            mech_noise[name] = (
                np.concatenate([n[name][0] for n in noise_steps], axis=0),
                np.concatenate([n[name][1] for n in noise_steps], axis=0),
            )
    with ad.no_grad():
        trace = agent.forward_batch(states_arr, mech_noise=mech_noise or None).trace
    return Trajectory(states_arr, np.asarray(actions), np.asarray(rewards, dtype=np.float64),
                      np.asarray(dones), np.asarray(log_ps), np.asarray(values),
                      trace, mech_noise)


def is_solved(mean_return: float, n_trials: int) -> bool:
    """The solved criterion: mean return >= 495 over the 100-trial protocol."""
    return n_trials == SOLVED_TRIALS and mean_return >= SOLVED_THRESHOLD


def evaluate(agent: ActorCritic, mode: str, n_trials: int, rng: np.random.Generator,
             ncp_ranges: envs.NcpRanges | None = None) -> tuple[float, bool]:
    """Mean return over fresh lockstep trials with pure policy sampling.

    The solved flag is only meaningful at the 100-trial protocol.
    """
    if n_trials < 1:
        raise ValueError("evaluate needs n_trials >= 1")
    vec = envs.VecCartPole(mode, n_trials, rng, ncp_ranges)
    while not vec.all_done():
        with ad.no_grad():
            out = agent.forward_batch(vec.states, mech_rng=rng)
        u = rng.random(n_trials)
        actions = (u >= out.probs.data[:, 0]).astype(int)
        vec.step(actions)
    mean_return = float(vec.returns.mean())
    return mean_return, is_solved(mean_return, n_trials)


def _episode_costs(agent, cfg: RunConfig, traj: Trajectory) -> tuple[float, float]:
    """Per-episode policy/value costs under the training loss definition."""
    returns = mc_returns(traj.rewards, cfg.gamma)
    adv = gae(traj.rewards, np.append(traj.values, 0.0), cfg.gamma, cfg.lam)
    if cfg.normalize_adv and len(adv) > 1:
        adv = normalize_advantages(adv)
    with ad.no_grad():
        fwd = agent.forward_batch(traj.states, mech_noise=traj.mech_noise or None)
        j_pi, j_v, _ = a2c_loss(fwd, traj.actions, adv, returns, cfg.entropy_coef)
    return float(j_pi.data), float(j_v.data)


def _calibrate_scalarizer(agent, cfg: RunConfig, rng: np.random.Generator):
    """Sample untrained-rollout costs and fit the standardization."""
    sched = ExplorationSchedule(eps0=0.0, decay=1.0)
    costs_pi, costs_v = [], []
    for _ in range(cfg.calibration_samples):
        traj = run_episode(agent, cfg.train_env_mode, sched, rng, cfg.ncp_ranges)
        j_pi, j_v = _episode_costs(agent, cfg, traj)
        costs_pi.append(j_pi)
        costs_v.append(j_v)
    return calibrate(costs_pi, costs_v, cfg.z_score)


def _grad_snapshot(agent) -> dict[str, np.ndarray | None]:
    out = {}
    for group in TRAINABLE_GROUPS:
        for name, t in agent.registry.group(group):
            out[name] = None if t.grad is None else t.grad.copy()
    return out


def _clip_gradients(agent, max_norm: float | None) -> None:
    """Scale all trainable gradients so their global norm is at most max_norm."""
    if max_norm is None:
        return
    total = 0.0
    grads = []
    for _, t in agent.registry.trainable():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
            grads.append(t)
    norm = np.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for t in grads:
            t.grad *= factor


def _apply_update(agent, optimizer, bundle, use_pcgrad: bool,
                  max_grad_norm: float | None = None) -> None:
    """Backward + optimizer step; with conflicting-gradient surgery the two
    objectives are backpropagated separately and the shared-feature groups'
    gradients are projected before the step. Clipping is the final transform
    before the step."""
    registry = agent.registry
    shared_groups = agent.shared_feature_groups() if use_pcgrad else []
    if not shared_groups:
        optimizer.zero_grad()
        ad.backward(bundle.total)
        _clip_gradients(agent, max_grad_norm)
        optimizer.step()
        return
    registry.zero_grad()
    ad.backward(bundle.main_pi)
    snap_pi = _grad_snapshot(agent)
    registry.zero_grad()
    ad.backward(bundle.main_v)
    snap_v = _grad_snapshot(agent)
    snap_extra = None
    if bundle.extra is not None:
        registry.zero_grad()
        ad.backward(bundle.extra)
        snap_extra = _grad_snapshot(agent)
    registry.zero_grad()
    shared_names = set()
    for group in shared_groups:
        names = [n for n, _ in registry.group(group)]
        shared_names.update(names)
        g1 = np.concatenate([(snap_pi[n] if snap_pi[n] is not None
                              else np.zeros(registry.get(n).size)).ravel() for n in names]) \
            if names else np.zeros(0)
        g2 = np.concatenate([(snap_v[n] if snap_v[n] is not None
                              else np.zeros(registry.get(n).size)).ravel() for n in names]) \
            if names else np.zeros(0)
        p1, p2 = pcgrad(g1, g2)
        registry.set_grad_from_vector(group, p1 + p2)
    for group in TRAINABLE_GROUPS:
        for name, t in registry.group(group):
            if name in shared_names:
                base = t.grad  # projected sum already in place
            else:
                base = np.zeros_like(t.data)
                if snap_pi[name] is not None:
                    base = base + snap_pi[name]
                if snap_v[name] is not None:
                    base = base + snap_v[name]
                t.grad = base
            if snap_extra is not None and snap_extra[name] is not None:
                t.grad = t.grad + snap_extra[name]
    _clip_gradients(agent, max_grad_norm)
    optimizer.step()


@dataclass
class TrainResult:
    stats: TrainingStats
    agent: ActorCritic


def train_with_agent(config: RunConfig, seed: int) -> TrainResult:
    """Full training run; returns the stats and the trained agent."""
    t0 = time.perf_counter()
    root = np.random.SeedSequence(seed)
    init_ss, rollout_ss, calib_ss, mc_ss, eval_ss = root.spawn(5)
    init_rng = np.random.default_rng(init_ss)
    rollout_rng = np.random.default_rng(rollout_ss)
    mc_rng = np.random.default_rng(mc_ss)

    agent = ActorCritic(config.arch, init_rng)
    group_lr = {"value": config.value_lr} if config.value_lr is not None else None
    optimizer = Adam(agent.registry, config.learning_rate, group_lr=group_lr)
    stats = TrainingStats(seed=seed, config_hash=config.config_hash())

    scalarizer = None
    if config.multiobj_mode in ("scalarize", "both"):
        scalarizer = _calibrate_scalarizer(agent, config, np.random.default_rng(calib_ss))
    use_pcgrad = config.multiobj_mode in ("pcgrad", "both")

    schedule = ExplorationSchedule(config.epsilon0, config.epsilon_decay)
    recal_pi: list[float] = []
    recal_v: list[float] = []
    final_eval_done = False

    for ep in range(1, config.episodes + 1):
        eps_at_start = schedule.epsilon
        traj = run_episode(agent, config.train_env_mode, schedule, rollout_rng, config.ncp_ranges)
        returns = mc_returns(traj.rewards, config.gamma)
        adv = gae(traj.rewards, np.append(traj.values, 0.0), config.gamma, config.lam)
        if config.normalize_adv and len(adv) > 1:
            adv = normalize_advantages(adv)
        fwd = agent.forward_batch(traj.states, mech_noise=traj.mech_noise or None)
        bundle = total_objective(agent, fwd, traj.actions, adv, returns,
                                 beta=config.entropy_coef, step=ep - 1,
                                 scalarizer=scalarizer, mc_rng=mc_rng,
                                 value_coef=config.value_coef)
        components = bundle.components()
        if not all(np.isfinite(v) for v in components.values()) or \
                not np.isfinite(bundle.total.data).all():
            stats.aborted = f"non-finite loss at episode {ep}: {components}"
            log.error(stats.aborted)
            break
        _apply_update(agent, optimizer, bundle, use_pcgrad, config.max_grad_norm)
        if agent.momentum_mechanisms:
            agent.momentum_step()

        row = EpisodeRow(episode=ep, train_return=traj.total_return,
                         steps=len(traj.rewards), epsilon=eps_at_start,
                         components=components)
        if scalarizer is not None and config.recalibrate_interval > 0:
            recal_pi.append(components["j_pi"])
            recal_v.append(components["j_v"])
            if ep % config.recalibrate_interval == 0 and len(recal_pi) >= 2:
                scalarizer = calibrate(recal_pi, recal_v, config.recalibrate_z)
                recal_pi, recal_v = [], []

        if config.eval_interval > 0 and ep % config.eval_interval == 0:
            eval_rng = np.random.default_rng(eval_ss.spawn(1)[0])
            mean_ret, solved = evaluate(agent, config.eval_env_mode, config.eval_trials,
                                        eval_rng, config.ncp_ranges)
            row.eval_return = mean_ret
            row.solved = solved
            if solved:
                stats.solved = True
                stats.final_eval = mean_ret
                final_eval_done = config.eval_trials == SOLVED_TRIALS
        stats.rows.append(row)
        stats.episodes_run = ep
        if stats.solved:
            break

    if not final_eval_done and stats.aborted is None:
        eval_rng = np.random.default_rng(eval_ss.spawn(1)[0])
        stats.final_eval, solved = evaluate(agent, config.eval_env_mode, SOLVED_TRIALS,
                                            eval_rng, config.ncp_ranges)
        stats.solved = stats.solved or solved
    stats.wall_clock = time.perf_counter() - t0
    return TrainResult(stats=stats, agent=agent)


def train(config: RunConfig, seed: int) -> TrainingStats:
    """Train one agent; per-episode loop with one update per episode."""
    return train_with_agent(config, seed).stats


# ---------------------------------------------------------------------------
# similarity-delta measurement
# ---------------------------------------------------------------------------

@dataclass
class SimilarityResult:
    layer_names: list[str]
    mean_deltas: np.ndarray  # (n_layers,)
    per_model: np.ndarray  # (n_models, n_layers)
    trained_sims: np.ndarray  # (n_models, n_layers)
    untrained_sims: np.ndarray


def _layer_cosines(agent: ActorCritic, states: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """Mean cosine similarity between policy/value activations per layer."""
    with ad.no_grad():
        trace = agent.forward_batch(states, mech_rng=rng).trace
    sims = []
    for hp, hv in zip(trace.policy_layers, trace.value_layers):
        a, b = hp.data, hv.data
        num = (a * b).sum(axis=-1)
        den = np.sqrt((a * a).sum(axis=-1)) * np.sqrt((b * b).sum(axis=-1)) + 1e-12
        sims.append(float((num / den).mean()))
    return np.asarray(sims)


def _rollout_states(agent, mode, n_rollouts, rng, ncp_ranges) -> np.ndarray:
    sched = ExplorationSchedule(eps0=0.0, decay=1.0)
    chunks = [run_episode(agent, mode, sched, rng, ncp_ranges).states
              for _ in range(n_rollouts)]
    return np.concatenate(chunks, axis=0)


def layer_names_for(arch_cfg: ArchitectureConfig) -> list[str]:
    if arch_cfg.arch in ("separated", "mix_ac"):
        return [f"hidden{i + 1}" for i in range(len(arch_cfg.trunk_hidden))]
    return ["backbone", "head_hidden"]


def similarity_delta_experiment(config: RunConfig, n_models: int, n_rollouts: int,
                                seed: int = 0) -> SimilarityResult:
    """Layerwise expected change in policy/value latent similarity from
    training, over independently seeded models and their own rollouts.

    Every model is measured twice with identical rollout streams: once
    untrained and once after its training run, so a zero-episode run
    yields exactly zero deltas.
    """
    names = layer_names_for(config.arch)
    trained_rows, untrained_rows = [], []
    root = np.random.SeedSequence([seed, 0x51D])
    for i in range(n_models):
        model_ss = root.spawn(1)[0]
        model_seed = int(np.random.default_rng(model_ss).integers(2 ** 31))
        untrained = ActorCritic(config.arch,
                                np.random.default_rng(np.random.SeedSequence(model_seed).spawn(5)[0]))
        result = train_with_agent(config, model_seed)
        roll_a = np.random.default_rng(np.random.SeedSequence([model_seed, 1]))
        roll_b = np.random.default_rng(np.random.SeedSequence([model_seed, 1]))
        mode = config.train_env_mode
        states_untrained = _rollout_states(untrained, mode, n_rollouts, roll_a, config.ncp_ranges)
        states_trained = _rollout_states(result.agent, mode, n_rollouts, roll_b, config.ncp_ranges)
        mrng_a = np.random.default_rng(np.random.SeedSequence([model_seed, 2]))
        mrng_b = np.random.default_rng(np.random.SeedSequence([model_seed, 2]))
        untrained_rows.append(_layer_cosines(untrained, states_untrained, mrng_a))
        trained_rows.append(_layer_cosines(result.agent, states_trained, mrng_b))
    trained_arr = np.vstack(trained_rows)
    untrained_arr = np.vstack(untrained_rows)
    per_model = trained_arr - untrained_arr
    return SimilarityResult(layer_names=names, mean_deltas=per_model.mean(axis=0),
                            per_model=per_model, trained_sims=trained_arr,
                            untrained_sims=untrained_arr)
