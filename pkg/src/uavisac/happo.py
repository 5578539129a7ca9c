"""C-HAPPO: heterogeneous-agent PPO with sequential M-factor updates and a
reward-gated curriculum over the task grading parameters.

Seeds: every random stream is ``SeedSequence(master, spawn_key=(round, worker,
stream))`` with streams ``ENV_STREAM`` (channel/measurement draws),
``ACT_STREAM`` (policy sampling) and, under worker index ``TRAINER_WORKER``,
``PERM_STREAM`` (agent permutation). Collection order is fixed by worker
index, so results do not depend on how rollouts are scheduled.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import EnvConfig, TrainerConfig
from .env import EnvAbort, IsacEnv, JointAction, RunningNormalizer
from .nn import (
    Adam,
    GaussianPolicy,
    MlpSpec,
    backward,
    clip_grad_norm,
    clipped_surrogate,
    forward,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

ENV_STREAM, ACT_STREAM, PERM_STREAM, INIT_STREAM = 0, 1, 2, 3
TRAINER_WORKER = 2**16
EVAL_ROUND = 2**31
MAX_RATIO = 1e4
MAX_REFILLS = 5


class TrainingHalted(RuntimeError):
    """Non-finite losses; a checkpoint was written before raising."""


def stream(master: int, round_idx: int, worker: int, kind: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master, spawn_key=(round_idx, worker, kind)))


def stream_seed(master: int, round_idx: int, worker: int, kind: int) -> int:
    ss = np.random.SeedSequence(master, spawn_key=(round_idx, worker, kind))
    return int(ss.generate_state(1, np.uint64)[0])


# -- curriculum ---------------------------------------------------------------

@dataclass
class CurriculumState:
    level: int
    levels: int
    reduced: np.ndarray
    final: np.ndarray
    threshold: float
    enabled: bool = True

    @classmethod
    def create(cls, final, reduced, levels: int, threshold: float, enabled: bool = True) -> "CurriculumState":
        if levels < 1:
            raise ValueError("levels must be >= 1")
        level = 1 if enabled else levels
        return cls(level, levels, np.asarray(reduced, float), np.asarray(final, float), threshold, enabled)

    def grading(self, level: int | None = None) -> np.ndarray:
        l = self.level if level is None else level
        if l == self.levels:
            return self.final.copy()
        return l * (self.final - self.reduced) / self.levels + self.reduced


def curriculum_check(state: CurriculumState, episode_reward: float) -> tuple[CurriculumState, bool]:
    """Advance one level when the mean episode reward exceeds the threshold."""
    if state.enabled and state.level < state.levels and episode_reward > state.threshold:
        return dataclasses.replace(state, level=state.level + 1), True
    return state, False


# -- agents -------------------------------------------------------------------

@dataclass
class Critic:
    spec: MlpSpec
    params: np.ndarray
    value_norm: RunningNormalizer | None

    def raw(self, states) -> np.ndarray:
        return forward(self.spec, self.params, states)[0][..., 0]

    def value(self, states) -> np.ndarray:
        out = self.raw(states)
        if self.value_norm is None:
            return out
        return out * math.sqrt(self.value_norm.var[0] + self.value_norm.eps) + self.value_norm.mean[0]

    def target(self, returns) -> np.ndarray:
        if self.value_norm is None:
            return np.asarray(returns, float)
        return (np.asarray(returns, float) - self.value_norm.mean[0]) / math.sqrt(
            self.value_norm.var[0] + self.value_norm.eps)


@dataclass
class Agents:
    actors: list[GaussianPolicy]
    critic: Critic
    obs_norm: RunningNormalizer
    state_norm: RunningNormalizer
    actor_opt: list[Adam]
    critic_opt: Adam

    @classmethod
    def create(cls, env: IsacEnv, tcfg: TrainerConfig, rng: np.random.Generator) -> "Agents":
        width = tcfg.width
        scales = [tcfg.actor_out_scale] * env.n + [tcfg.bs_out_scale]
        actors = [GaussianPolicy.create(env.obs_dim, d, width, rng, tcfg.log_std_init, s)
                  for d, s in zip(env.action_dims, scales)]
        cspec = MlpSpec.standard(env.state_dim, 1, width)
        critic = Critic(cspec, cspec.init(rng), RunningNormalizer(1, clip=np.inf) if tcfg.value_norm else None)
        return cls(
            actors=actors,
            critic=critic,
            obs_norm=RunningNormalizer(env.core_dim),
            state_norm=RunningNormalizer(env.state_dim),
            actor_opt=[Adam(a.params.size, tcfg.lr_actor) for a in actors],
            critic_opt=Adam(critic.params.size, tcfg.lr_critic),
        )

    def reset_optimizers(self) -> None:
        for opt in self.actor_opt:
            opt.reset()
        self.critic_opt.reset()

    def agent_obs(self, core) -> np.ndarray:
        """Per-agent observations ``(A, obs_dim)`` from one raw core vector."""
        z = self.obs_norm.normalize(core)
        n_agents = len(self.actors)
        return np.concatenate([np.tile(z, (n_agents, 1)), np.eye(n_agents)], axis=1)

    def act(self, core, rng, deterministic: bool = False):
        obs = self.agent_obs(core)
        acts, logps = [], np.empty(len(self.actors))
        for i, pol in enumerate(self.actors):
            a, lp = pol.sample(obs[i], rng, deterministic)
            acts.append(a)
            logps[i] = lp
        return obs, acts, logps


def to_joint_action(acts: list[np.ndarray], n_uavs: int) -> JointAction:
    return JointAction(np.stack(acts[:n_uavs]), acts[n_uavs])


# -- rollouts -----------------------------------------------------------------

@dataclass
class EpisodeLog:
    obs: np.ndarray  # (T, A, obs_dim)
    core: np.ndarray  # (T, core_dim) raw
    state: np.ndarray  # (T + 1, state_dim) raw, last row is the terminal state
    actions: list[np.ndarray]  # per agent (T, act_dim)
    logp: np.ndarray  # (T, A)
    rewards: np.ndarray  # (T,)
    dones: np.ndarray  # (T,)
    rho: np.ndarray  # (T,)
    rho_bs_only: np.ndarray
    violations: np.ndarray  # (T, N)
    err: np.ndarray  # (T, 3) EKF position error
    trace: list[dict] = field(default_factory=list)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    @property
    def rmse(self) -> np.ndarray:
        return np.sqrt(np.mean(self.err**2, axis=0))


@dataclass
class RolloutBatch:
    episodes: list[EpisodeLog]

    @property
    def mean_episode_reward(self) -> float:
        return float(np.mean([e.total_reward for e in self.episodes]))

    def stack(self, name: str) -> np.ndarray:
        return np.stack([getattr(e, name) for e in self.episodes])

    def agent_actions(self, i: int) -> np.ndarray:
        return np.concatenate([e.actions[i] for e in self.episodes])


def trace_row(info: dict, reward) -> dict:
    row = {"t": info["t"], "rho": info["rho"], "rho_bs_only": info["rho_bs_only"],
           "r_s": reward.r_s, "reward": reward.total, "beam_power": info["beam_power"],
           "sense_bs_db": info["sense_bs_db"]}
    for k, name in enumerate("xyz"):
        row[f"target_{name}"] = info["truth"][k]
        row[f"est_{name}"] = info["est"][k]
    for n, pos in enumerate(info["uav_pos"], start=1):
        for k, name in enumerate("xyz"):
            row[f"uav{n}_{name}"] = pos[k]
        row[f"comm_sinr_db_{n}"] = info["comm_sinr_db"][n - 1]
        row[f"sense_uav_db_{n}"] = info["sense_uav_db"][n - 1]
        row[f"r_c_{n}"] = reward.r_c[n - 1]
    return row


def run_episode(env: IsacEnv, policy: Callable, env_seed: int, record_trace: bool = False,
                horizon: int | None = None) -> EpisodeLog:
    """Play one episode with ``policy(env, core) -> (obs, acts, logps)``."""
    core = env.reset(env_seed).core
    T = env.cfg.slots if horizon is None else min(horizon, env.cfg.slots)
    obs_l, core_l, state_l, act_l, logp_l = [], [], [], [], []
    rew, done_l, rho, rho_bs, viol, err, trace = [], [], [], [], [], [], []
    for _ in range(T):
        state_l.append(env.state())
        obs, acts, logps = policy(env, core)
        obs_l.append(obs)
        core_l.append(core)
        act_l.append(acts)
        logp_l.append(logps)
        o, r, done, info = env.step(to_joint_action(acts, env.n))
        core = o.core
        rew.append(r.total)
        done_l.append(done or len(rew) == T)
        rho.append(info["rho"])
        rho_bs.append(info["rho_bs_only"])
        viol.append(info["violations"])
        err.append(info["est"][:3] - info["truth"][:3])
        if record_trace:
            trace.append(trace_row(info, r))
    state_l.append(env.state())
    n_agents = env.n_agents
    return EpisodeLog(
        obs=np.array(obs_l), core=np.array(core_l), state=np.array(state_l),
        actions=[np.array([a[i] for a in act_l]) for i in range(n_agents)],
        logp=np.array(logp_l), rewards=np.array(rew), dones=np.array(done_l, bool),
        rho=np.array(rho), rho_bs_only=np.array(rho_bs), violations=np.array(viol, bool),
        err=np.array(err), trace=trace,
    )


def collect_rollouts(envs: list[IsacEnv], agents: Agents, master: int, round_idx: int,
                     horizon: int | None = None, deterministic: bool = False) -> RolloutBatch:
    """One episode per worker, in worker order. Aborted episodes are replayed
    with a fresh seed (up to ``MAX_REFILLS`` times)."""
    episodes = []
    for w, env in enumerate(envs):
        for attempt in range(MAX_REFILLS + 1):
            rng = stream(master, round_idx, w + attempt * len(envs), ACT_STREAM)

            def policy(env_, core, rng=rng):
                return agents.act(core, rng, deterministic)

            try:
                seed = stream_seed(master, round_idx, w + attempt * len(envs), ENV_STREAM)
                episodes.append(run_episode(env, policy, seed, horizon=horizon))
                break
            except EnvAbort as exc:
                log.warning("worker %d round %d aborted (%s); refilling", w, round_idx, exc)
        else:
            raise RuntimeError(f"worker {w} aborted {MAX_REFILLS + 1} times in round {round_idx}")
    return RolloutBatch(episodes)


# -- advantages and updates ---------------------------------------------------

def compute_gae(rewards, values, dones, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """GAE over the last axis. ``values`` has one extra bootstrap entry per row;
    the bootstrap is ignored wherever ``dones`` is set."""
    r = np.atleast_2d(np.asarray(rewards, float))
    v = np.atleast_2d(np.asarray(values, float))
    d = np.atleast_2d(np.asarray(dones, bool))
    T = r.shape[-1]
    if v.shape[-1] != T + 1:
        raise ValueError("values need one bootstrap entry beyond the rewards")
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[0])
    for t in range(T - 1, -1, -1):
        live = 1.0 - d[:, t]
        delta = r[:, t] + gamma * v[:, t + 1] * live - v[:, t]
        last = delta + gamma * lam * live * last
        adv[:, t] = last
    ret = adv + v[:, :T]
    shape = np.shape(rewards)
    return adv.reshape(shape), ret.reshape(shape)


def critic_loss_and_grad(critic: Critic, states, targets, params=None):
    p = critic.params if params is None else params
    out, cache = forward(critic.spec, p, states)
    err = out[:, 0] - targets
    loss = float(np.mean(err**2))
    grad, _ = backward(critic.spec, p, cache, (2.0 * err / len(err))[:, None])
    return loss, grad


def _minibatches(n: int, k: int, rng):
    if k <= 1:
        return [np.arange(n)]
    return np.array_split(rng.permutation(n), k)


def critic_update(critic: Critic, opt: Adam, states, returns, epochs: int, max_grad_norm: float,
                  minibatches: int = 1, rng=None) -> list[float]:
    """Regress values onto returns; returns the full-batch loss before and after each epoch."""
    targets = critic.target(returns)
    losses = [critic_loss_and_grad(critic, states, targets)[0]]
    for _ in range(epochs):
        for idx in _minibatches(len(targets), minibatches, rng):
            loss, grad = critic_loss_and_grad(critic, states[idx], targets[idx])
            if not math.isfinite(loss):
                raise FloatingPointError("non-finite critic loss")
            critic.params = opt.step(critic.params, clip_grad_norm(grad, max_grad_norm))
        losses.append(critic_loss_and_grad(critic, states, targets)[0])
    return losses


def ppo_agent_update(policy: GaussianPolicy, opt: Adam, obs, act, logp_old, m_factor, tcfg: TrainerConfig,
                     rng=None) -> dict:
    """Maximise the clipped surrogate for one agent.

    With ``tcfg.target_kl > 0`` the update stops after the first minibatch
    step at which the sample KL against the collection policy exceeds
    ``target_kl`` per action dimension.
    """
    kl_limit = tcfg.target_kl * policy.act_dim
    values, kl, epochs_run = [], 0.0, 0
    for _ in range(tcfg.epochs):
        stop = False
        for idx in _minibatches(len(m_factor), tcfg.minibatches, rng):
            val, grad = clipped_surrogate(policy, obs[idx], act[idx], logp_old[idx], m_factor[idx], tcfg.clip_eps)
            if not math.isfinite(val):
                raise FloatingPointError("non-finite surrogate")
            if tcfg.entropy_coef:
                grad[policy.spec.n_params:] += tcfg.entropy_coef * (policy.split()[1] > math.log(1e-6))
            policy.params = opt.step(policy.params, -clip_grad_norm(grad, tcfg.max_grad_norm))
            values.append(val)
            log_ratio = policy.log_prob(obs, act) - logp_old
            kl = float(np.mean(np.expm1(log_ratio) - log_ratio))
            if kl_limit > 0 and kl > kl_limit:
                stop = True
                break
        epochs_run += 1
        if stop:
            break
    return {"surrogate": values, "kl": kl, "epochs": epochs_run}


def ratio_update(m_factor, logp_new, logp_old) -> np.ndarray:
    """``M <- (pi_new / pi_old) M`` with the ratio clamped at ``MAX_RATIO``."""
    log_ratio = np.asarray(logp_new, float) - np.asarray(logp_old, float)
    if np.any(log_ratio > math.log(MAX_RATIO)):
        log.warning("probability ratio above %.0e clamped", MAX_RATIO)
    return np.exp(np.minimum(log_ratio, math.log(MAX_RATIO))) * m_factor


def actor_update_sequential(agents: Agents, obs, actions, logp_old, advantages, tcfg: TrainerConfig,
                            rng: np.random.Generator) -> dict:
    """Update agents one by one in a random order, threading the M-factor.

    ``obs`` is ``(S, A, obs_dim)``, ``actions`` a per-agent list of ``(S, act_dim)``,
    ``logp_old`` is ``(S, A)``, ``advantages`` is ``(S,)``.
    """
    adv = np.asarray(advantages, float)
    if tcfg.adv_norm:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    order = rng.permutation(len(agents.actors))
    m_factor = adv.copy()
    stats = {}
    for i in order:
        pol = agents.actors[i]
        stats[int(i)] = ppo_agent_update(pol, agents.actor_opt[i], obs[:, i], actions[i], logp_old[:, i], m_factor,
                                         tcfg, rng)
        m_factor = ratio_update(m_factor, pol.log_prob(obs[:, i], actions[i]), logp_old[:, i])
    return {"order": order.tolist(), "m_final": m_factor, "agents": stats}


# -- training loop --------------------------------------------------------------

METRIC_FIELDS = ["episode", "level", "mean_reward", "mean_rho", "violation_rate", "rmse_x", "rmse_y", "rmse_z"]


def round_metrics(round_idx: int, level: int, batch: RolloutBatch) -> dict:
    rmse = np.mean([e.rmse for e in batch.episodes], axis=0)
    return {
        "episode": round_idx + 1,
        "level": level,
        "mean_reward": batch.mean_episode_reward,
        "mean_rho": float(np.mean([e.rho.mean() for e in batch.episodes])),
        "violation_rate": float(np.mean([e.violations.mean() for e in batch.episodes])),
        "rmse_x": float(rmse[0]),
        "rmse_y": float(rmse[1]),
        "rmse_z": float(rmse[2]),
    }


@dataclass
class TrainResult:
    rows: list[dict]
    agents: Agents
    curriculum: CurriculumState
    transitions: list[int]
    halted: bool = False


def _update(agents: Agents, batch: RolloutBatch, tcfg: TrainerConfig, rng) -> None:
    states = agents.state_norm.normalize(batch.stack("state"))  # (W, T+1, S)
    W, T1, S = states.shape
    values = agents.critic.value(states.reshape(-1, S)).reshape(W, T1)
    adv, ret = compute_gae(batch.stack("rewards"), values, batch.stack("dones"), tcfg.gamma, tcfg.gae_lambda)
    obs = batch.stack("obs").reshape(W * (T1 - 1), *batch.episodes[0].obs.shape[1:])
    actions = [batch.agent_actions(i) for i in range(len(agents.actors))]
    logp = batch.stack("logp").reshape(W * (T1 - 1), -1)
    info = actor_update_sequential(agents, obs, actions, logp, adv.ravel(), tcfg, rng)
    log.debug("update: %s", {i: (round(a["kl"], 4), a["epochs"]) for i, a in info["agents"].items()})
    if agents.critic.value_norm is not None:
        agents.critic.value_norm.update(ret.reshape(-1, 1))
    critic_update(agents.critic, agents.critic_opt, states[:, :-1].reshape(-1, S), ret.ravel(), tcfg.epochs,
                  tcfg.max_grad_norm, tcfg.minibatches, rng)


def _update_normalizers(agents: Agents, batch: RolloutBatch) -> None:
    agents.obs_norm.update(np.concatenate([e.core for e in batch.episodes]))
    agents.state_norm.update(np.concatenate([e.state for e in batch.episodes]))


def checkpoint_segments(agents: Agents) -> dict:
    seg = {}
    for i, (a, opt) in enumerate(zip(agents.actors, agents.actor_opt)):
        seg[f"actor{i}"] = ([a.params.size], a.params)
        seg[f"actor{i}_m"] = ([opt.m.size], opt.m)
        seg[f"actor{i}_v"] = ([opt.v.size], opt.v)
    seg["critic"] = ([agents.critic.params.size], agents.critic.params)
    seg["critic_m"] = ([agents.critic_opt.m.size], agents.critic_opt.m)
    seg["critic_v"] = ([agents.critic_opt.v.size], agents.critic_opt.v)
    return seg


def save_training_checkpoint(path, agents: Agents, cur: CurriculumState, transitions, seed: int, step: int,
                             extra: dict | None = None) -> None:
    meta = {
        "level": cur.level,
        "transitions": list(transitions),
        "actor_t": [o.t for o in agents.actor_opt],
        "critic_t": agents.critic_opt.t,
        "actor_sizes": [list(a.spec.sizes) for a in agents.actors],
        "critic_sizes": list(agents.critic.spec.sizes),
        "obs_norm": agents.obs_norm.to_dict(),
        "state_norm": agents.state_norm.to_dict(),
        "value_norm": agents.critic.value_norm.to_dict() if agents.critic.value_norm else None,
        **(extra or {}),
    }
    save_checkpoint(path, checkpoint_segments(agents), seed, step, meta)


def restore_checkpoint(path, agents: Agents, cur: CurriculumState) -> tuple[int, CurriculumState, list[int], dict]:
    header, arrays = load_checkpoint(path)
    meta = header["extra"]
    for i, (a, opt) in enumerate(zip(agents.actors, agents.actor_opt)):
        if list(a.spec.sizes) != meta["actor_sizes"][i]:
            raise ValueError("checkpoint actor shapes do not match the configuration")
        a.params = arrays[f"actor{i}"].copy()
        opt.m, opt.v, opt.t = arrays[f"actor{i}_m"].copy(), arrays[f"actor{i}_v"].copy(), meta["actor_t"][i]
    if list(agents.critic.spec.sizes) != meta["critic_sizes"]:
        raise ValueError("checkpoint critic shape does not match the configuration")
    agents.critic.params = arrays["critic"].copy()
    agents.critic_opt.m, agents.critic_opt.v = arrays["critic_m"].copy(), arrays["critic_v"].copy()
    agents.critic_opt.t = meta["critic_t"]
    agents.obs_norm = RunningNormalizer.from_dict(meta["obs_norm"])
    agents.state_norm = RunningNormalizer.from_dict(meta["state_norm"])
    if meta["value_norm"] is not None:
        agents.critic.value_norm = RunningNormalizer.from_dict(meta["value_norm"])
    return header["step"], dataclasses.replace(cur, level=meta["level"]), list(meta["transitions"]), meta


def train(env_cfg: EnvConfig, tcfg: TrainerConfig, seed: int, on_row: Callable[[dict], None] | None = None,
          checkpoint_dir: Path | None = None, resume: Path | None = None,
          on_timing: Callable[[int, float], None] | None = None) -> TrainResult:
    """Run ``tcfg.episodes`` collection rounds of C-HAPPO (one episode per worker each)."""
    cur = CurriculumState.create(env_cfg.grading, tcfg.reduced_grading, tcfg.levels, tcfg.reward_threshold,
                                 tcfg.curriculum)
    envs = [IsacEnv(env_cfg) for _ in range(tcfg.workers)]
    agents = Agents.create(envs[0], tcfg, stream(seed, 0, TRAINER_WORKER, INIT_STREAM))
    transitions: list[int] = []
    start = 0
    if resume is not None:
        start, cur, transitions, _ = restore_checkpoint(resume, agents, cur)
        log.info("resumed from %s at round %d (level %d)", resume, start, cur.level)
    for env in envs:
        env.set_grading(cur.grading())
    rows: list[dict] = []
    for k in range(start, tcfg.episodes):
        t0 = time.perf_counter()
        batch = collect_rollouts(envs, agents, seed, k)
        level_used = cur.level
        cur, fired = curriculum_check(cur, batch.mean_episode_reward)
        if fired:
            transitions.append(k + 1)
            log.info("curriculum level %d reached after round %d", cur.level, k + 1)
            for env in envs:
                env.set_grading(cur.grading())
            agents.reset_optimizers()
        try:
            _update(agents, batch, tcfg, stream(seed, k, TRAINER_WORKER, PERM_STREAM))
        except FloatingPointError as exc:
            if checkpoint_dir is not None:
                save_training_checkpoint(Path(checkpoint_dir) / "halted.ckpt", agents, cur, transitions, seed, k)
            raise TrainingHalted(f"round {k + 1}: {exc}") from exc
        _update_normalizers(agents, batch)
        row = round_metrics(k, level_used, batch)
        rows.append(row)
        if on_row:
            on_row(row)
        if on_timing:
            on_timing(k + 1, time.perf_counter() - t0)
        if checkpoint_dir is not None and tcfg.checkpoint_every and (k + 1) % tcfg.checkpoint_every == 0:
            save_training_checkpoint(Path(checkpoint_dir) / f"round{k + 1:05d}.ckpt", agents, cur, transitions,
                                     seed, k + 1)
    if checkpoint_dir is not None:
        save_training_checkpoint(Path(checkpoint_dir) / "final.ckpt", agents, cur, transitions, seed, tcfg.episodes)
    return TrainResult(rows, agents, cur, transitions)


def evaluate_agents(agents: Agents, env_cfg: EnvConfig, seed: int, episodes: int = 1,
                    deterministic: bool = True) -> list[EpisodeLog]:
    """Greedy (mean-action) evaluation on the final grading; the last episode records a trace."""
    env = IsacEnv(env_cfg)
    out = []
    for e in range(episodes):
        rng = stream(seed, EVAL_ROUND, e, ACT_STREAM)

        def policy(env_, core, rng=rng):
            return agents.act(core, rng, deterministic)

        out.append(run_episode(env, policy, stream_seed(seed, EVAL_ROUND, e, ENV_STREAM),
                               record_trace=e == episodes - 1))
    return out
