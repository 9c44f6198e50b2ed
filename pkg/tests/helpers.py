"""Shared construction helpers for integration-level tests."""

from __future__ import annotations

from p4o.agent import Agent
from p4o.config import RunConfig, load_config
from p4o.envs import VectorEnv, make_env
from p4o.rng import Rng
from p4o.rollout import EpisodeStats, collect, start_carry
from p4o.trainer import Trainer


def tiny_config(**overrides) -> RunConfig:
    """A miniature but structurally complete run configuration."""
    base = dict(variant="p4o", env="pixelcatch", seed=0, precision=64,
                num_envs=2, batch_steps=10, minibatches=2, epochs=2,
                horizon=3, preset="toy", batches=2, checkpoint_every=1000)
    base.update(overrides)
    return load_config(overrides=base)


def build_setup(cfg: RunConfig):
    """(agent, vec_env, trainer, carry, stats, root rng) for a config."""
    rng = Rng(cfg.seed, "run")
    envs = VectorEnv([
        make_env(cfg.env, sticky=cfg.sticky, frame_stack=cfg.frame_stack,
                 tmaze_corridor=cfg.tmaze_corridor, catch_drops=cfg.catch_drops)
        for _ in range(cfg.num_envs)])
    agent = Agent(cfg, envs.obs_shape, envs.action_count, rng.stream("init"))
    trainer = Trainer(agent)
    carry = start_carry(agent, envs, rng.stream("collect"))
    stats = EpisodeStats()
    return agent, envs, trainer, carry, stats, rng


def one_buffer(cfg: RunConfig):
    agent, envs, trainer, carry, stats, rng = build_setup(cfg)
    buf = collect(agent, envs, carry, cfg.batch_steps, cfg.segment_len, stats)
    return agent, envs, trainer, carry, stats, buf
