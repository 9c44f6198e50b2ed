"""Batch collection, advantage estimation, and staleness repair.

A batch is T steps in each of N parallel environments. Recurrent state is
carried across batch boundaries (never reset between batches); episode
terminals zero the corresponding rows before the next step. The buffer keeps
per-segment boundary recurrent states so minibatches can backpropagate
through time over contiguous sequences.

Two repair procedures fight staleness during the epoch loop:

  * refresh_hidden_states re-runs the recurrent model (current parameters)
    over the buffer's stored latent sequence from the fixed batch-start
    state and re-snapshots every segment boundary. Called after every
    optimizer step.
  * refresh_advantages additionally recomputes state values and the
    bootstrap value the same way and re-runs GAE. Called before each
    epoch's minibatch sweep (per update if configured).

Neither procedure touches the acting-time values, which remain the critic's
clipping anchor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray, NumericError
from .agent import Agent
from .envs import VectorEnv
from .errors import EnvProtocolError
from .rng import Rng
from .worldmodel import RecurrentState


@dataclass
class EpisodeStats:
    """Rolling bookkeeping over completed episodes."""
    window: int = 100
    recent: list = field(default_factory=list)       # last `window` returns
    running: np.ndarray | None = None                # per-env partial returns
    completed: int = 0

    def start(self, num_envs: int) -> None:
        if self.running is None:
            self.running = np.zeros(num_envs, dtype=np.float64)

    def add_reward(self, env_index: int, reward: float) -> None:
        self.running[env_index] += reward

    def finish_episode(self, env_index: int) -> float:
        score = float(self.running[env_index])
        self.running[env_index] = 0.0
        self.recent.append(score)
        if len(self.recent) > self.window:
            self.recent.pop(0)
        self.completed += 1
        return score

    def rolling_mean(self) -> float | None:
        return float(np.mean(self.recent)) if self.recent else None

    def rolling_stderr(self) -> float | None:
        if len(self.recent) < 2:
            return None
        return float(np.std(self.recent, ddof=1) / np.sqrt(len(self.recent)))

    def get_state(self) -> dict:
        return {"window": self.window, "recent": list(self.recent),
                "running": None if self.running is None else self.running.tolist(),
                "completed": self.completed}

    def set_state(self, state: dict) -> None:
        self.window = state["window"]
        self.recent = list(state["recent"])
        self.running = None if state["running"] is None else \
            np.asarray(state["running"], dtype=np.float64)
        self.completed = state["completed"]


@dataclass
class RolloutBuffer:
    """One batch of interaction data, env-major layout [N, T, ...]."""
    observations: np.ndarray      # uint8 (N, T, C, H, W)
    latents: np.ndarray           # (N, T, p) acting-time encoder outputs
    actions: np.ndarray           # int64 (N, T)
    logp: np.ndarray              # (N, T) log-prob under the acting policy
    rewards: np.ndarray           # (N, T)
    terminals: np.ndarray         # bool (N, T)
    values: np.ndarray            # (N, T) acting-time values (never refreshed)
    values_refreshed: np.ndarray  # (N, T) values under current parameters
    advantages: np.ndarray        # (N, T)
    returns: np.ndarray           # (N, T)
    boundary_states: list         # per segment: RecurrentState arrays dict
    batch_start_state: dict       # fixed copy of boundary 0
    final_latent: np.ndarray      # (N, p) latent of the observation after step T-1
    bootstrap_value: np.ndarray   # (N,)
    policy_id: str                # acting policy's parameter snapshot identifier
    anchor_logp: np.ndarray | None = None  # (N, S) first-segment anchor log-probs
    episode_scores: list = field(default_factory=list)  # completed this batch

    @property
    def num_envs(self) -> int:
        return self.observations.shape[0]

    @property
    def num_steps(self) -> int:
        return self.observations.shape[1]

    def segment_slice(self, seg: int, seg_len: int) -> slice:
        return slice(seg * seg_len, (seg + 1) * seg_len)

    def dump(self, path) -> None:
        """Columnar debug dump; keys mirror the field names above."""
        np.savez_compressed(
            path, observations=self.observations, latents=self.latents,
            actions=self.actions, logp=self.logp, rewards=self.rewards,
            terminals=self.terminals, values=self.values,
            values_refreshed=self.values_refreshed, advantages=self.advantages,
            returns=self.returns, final_latent=self.final_latent,
            bootstrap_value=self.bootstrap_value)


@dataclass
class CollectCarry:
    """State threaded from one batch into the next."""
    state: RecurrentState
    last_obs: np.ndarray
    action_rngs: list[Rng]

    def get_state(self) -> dict:
        return {"state": {k: v.tolist() for k, v in self.state.to_arrays().items()},
                "last_obs": self.last_obs.tolist(),
                "action_rngs": [r.get_state() for r in self.action_rngs]}

    @staticmethod
    def from_state(d: dict, dtype) -> "CollectCarry":
        state = RecurrentState.from_arrays(
            {k: np.asarray(v, dtype=dtype) for k, v in d["state"].items()})
        rngs = []
        for s in d["action_rngs"]:
            r = Rng(0)
            r.set_state(s)
            rngs.append(r)
        return CollectCarry(state=state, last_obs=np.asarray(d["last_obs"], dtype=np.uint8),
                            action_rngs=rngs)


def start_carry(agent: Agent, envs: VectorEnv, rng: Rng) -> CollectCarry:
    seeds = [int(rng.stream("env-seed", i).integers(0, 2**63)) for i in range(envs.n)]
    obs = envs.reset_all(seeds)
    return CollectCarry(state=agent.initial_state(envs.n), last_obs=obs,
                        action_rngs=[rng.stream("action", i) for i in range(envs.n)])


def collect(agent: Agent, envs: VectorEnv, carry: CollectCarry, steps: int,
            seg_len: int, stats: EpisodeStats) -> RolloutBuffer:
    """Run `steps` policy steps in every environment and assemble a buffer."""
    n = envs.n
    c, h, w = envs.obs_shape
    p_dim = agent.cfg.latent_dim
    stats.start(n)

    obs_buf = np.zeros((n, steps, c, h, w), dtype=np.uint8)
    lat_buf = np.zeros((n, steps, p_dim), dtype=agent.dtype)
    act_buf = np.zeros((n, steps), dtype=np.int64)
    logp_buf = np.zeros((n, steps), dtype=np.float64)
    rew_buf = np.zeros((n, steps), dtype=np.float64)
    term_buf = np.zeros((n, steps), dtype=bool)
    val_buf = np.zeros((n, steps), dtype=np.float64)
    boundaries = []
    scores = []

    state = carry.state
    for t in range(steps):
        if t % seg_len == 0:
            boundaries.append(state.to_arrays())
        out = agent.act(carry.last_obs, state, carry.action_rngs)
        if not np.isfinite(out["step"].combined.data).all():
            raise NumericError(f"collect: non-finite recurrent state at step {t}")
        obs_buf[:, t] = carry.last_obs
        lat_buf[:, t] = out["latent"]
        act_buf[:, t] = out["actions"]
        logp_buf[:, t] = out["logp"]
        val_buf[:, t] = out["value"]

        next_obs = np.empty_like(carry.last_obs)
        keep = np.ones((n, 1), dtype=agent.dtype)
        for i, step_result in enumerate(_step_envs(envs, out["actions"], t)):
            rew_buf[i, t] = step_result.reward
            term_buf[i, t] = step_result.terminal
            stats.add_reward(i, step_result.reward)
            if step_result.terminal:
                scores.append(stats.finish_episode(i))
                next_obs[i] = envs.reset_one(i)
                keep[i, 0] = 0.0
            else:
                next_obs[i] = step_result.observation
        with ad.no_grad():
            state = out["state"].masked(keep)
        carry.last_obs = next_obs
    carry.state = state

    # bootstrap value from a throwaway step; the carried state is untouched
    with ad.no_grad():
        final_latent = agent.encoder.encode(agent.obs_to_input(carry.last_obs))
        boot_out = agent.step(final_latent, state)
        bootstrap = agent.policy(boot_out.combined).value.data.astype(np.float64)

    adv, ret = compute_gae(rew_buf, val_buf, term_buf, bootstrap,
                           agent.cfg.gamma, agent.cfg.gae_lambda)
    return RolloutBuffer(
        observations=obs_buf, latents=lat_buf, actions=act_buf, logp=logp_buf,
        rewards=rew_buf, terminals=term_buf, values=val_buf,
        values_refreshed=val_buf.copy(), advantages=adv, returns=ret,
        boundary_states=boundaries, batch_start_state={k: v.copy() for k, v in boundaries[0].items()},
        final_latent=final_latent.data.copy(), bootstrap_value=bootstrap,
        policy_id=agent.snapshot_id(), episode_scores=scores)


def _step_envs(envs: VectorEnv, actions: np.ndarray, t: int):
    for i in range(envs.n):
        try:
            yield envs.envs[i].step(int(actions[i]))
        except EnvProtocolError as exc:
            raise EnvProtocolError(f"env {i} at step {t}: {exc}") from exc


def compute_gae(rewards: np.ndarray, values: np.ndarray, terminals: np.ndarray,
                bootstrap_value: np.ndarray, gamma: float, lam: float
                ) -> tuple[np.ndarray, np.ndarray]:
    """Truncated generalized advantage estimation, vectorized over envs.

    delta_t = r_t + gamma * V(s_{t+1}) * (1 - done_t) - V(s_t)
    A_t     = delta_t + gamma * lambda * (1 - done_t) * A_{t+1}

    computed backwards from the bootstrap value; returns = A + V.
    """
    rewards = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    terminals = np.atleast_2d(np.asarray(terminals))
    boot = np.asarray(bootstrap_value, dtype=np.float64).reshape(-1)
    n, t_len = rewards.shape
    adv = np.zeros((n, t_len), dtype=np.float64)
    running = np.zeros(n, dtype=np.float64)
    next_value = boot
    for t in range(t_len - 1, -1, -1):
        nonterminal = 1.0 - terminals[:, t].astype(np.float64)
        delta = rewards[:, t] + gamma * next_value * nonterminal - values[:, t]
        running = delta + gamma * lam * nonterminal * running
        adv[:, t] = running
        next_value = values[:, t]
    return adv, adv + values


def replay_states(agent: Agent, buffer: RolloutBuffer, seg_len: int,
                  collect_combined: bool = False):
    """Re-run the recurrent model (current parameters) over the stored latent
    sequence from the fixed batch-start state. No gradients.

    Returns (boundary_state_arrays, combined or None, final_state)."""
    n, t_len = buffer.latents.shape[:2]
    combined = None
    boundaries = []
    with ad.no_grad():
        state = RecurrentState.from_arrays(buffer.batch_start_state, dtype=agent.dtype)
        if collect_combined:
            combined = np.zeros((n, t_len, agent.state_dim), dtype=np.float64)
        for t in range(t_len):
            if t % seg_len == 0:
                boundaries.append(state.to_arrays())
            out = agent.step(DiffArray(buffer.latents[:, t], dtype=agent.dtype), state)
            if collect_combined:
                combined[:, t] = out.combined.data
            keep = 1.0 - buffer.terminals[:, t].astype(agent.dtype).reshape(-1, 1)
            state = out.state.masked(keep)
    return boundaries, combined, state


def refresh_hidden_states(agent: Agent, buffer: RolloutBuffer, seg_len: int) -> None:
    """Re-snapshot every segment-boundary recurrent state under the current
    parameters. Idempotent between parameter updates."""
    boundaries, _, _ = replay_states(agent, buffer, seg_len)
    buffer.boundary_states = boundaries


def refresh_advantages(agent: Agent, buffer: RolloutBuffer, seg_len: int) -> None:
    """Recompute values (and the bootstrap) under current parameters and
    refreshed hidden states, then re-run GAE."""
    _, combined, final_state = replay_states(agent, buffer, seg_len, collect_combined=True)
    n, t_len = buffer.latents.shape[:2]
    with ad.no_grad():
        flat = DiffArray(combined.reshape(n * t_len, agent.state_dim), dtype=agent.dtype)
        values = agent.policy(flat).value.data.reshape(n, t_len).astype(np.float64)
        boot_out = agent.step(DiffArray(buffer.final_latent, dtype=agent.dtype), final_state)
        bootstrap = agent.policy(boot_out.combined).value.data.astype(np.float64)
    buffer.values_refreshed = values
    buffer.bootstrap_value = bootstrap
    adv, ret = compute_gae(buffer.rewards, values, buffer.terminals, bootstrap,
                           agent.cfg.gamma, agent.cfg.gae_lambda)
    buffer.advantages = adv
    buffer.returns = ret
