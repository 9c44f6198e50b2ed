"""Training-run orchestration: the collect/train loop, metrics persistence,
checkpointing and exact resume.

A run directory holds:

    config.json        resolved configuration
    metrics.jsonl      one record per batch (see metrics module)
    curve.csv          frames, rolling mean, stderr
    curve.png          learning-curve figure
    checkpoints/       ckpt_latest.ckpt and periodic ckpt_NNNNNN.ckpt

Checkpoints carry everything a bit-exact continuation needs: parameters,
optimizer moments, the first-update anchor parameters, carried recurrent
state and observations, action streams, environment states, episode
statistics and the batch counter. External (subprocess) environments cannot
serialize their state; resuming such a run resets the environments.
"""

from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np

from .agent import Agent
from .checkpoint import from_jsonable, load_arrays, save_arrays, to_jsonable
from .config import RunConfig, save_config
from .envs import VectorEnv, make_env
from .errors import ConfigError
from .metrics import MetricsWriter, read_metrics, write_curve_csv
from .plots import save_learning_curve
from .rng import Rng
from .rollout import EpisodeStats, collect, start_carry
from .trainer import Trainer


def build_envs(cfg: RunConfig) -> VectorEnv:
    return VectorEnv([
        make_env(cfg.env, sticky=cfg.sticky, frame_stack=cfg.frame_stack,
                 tmaze_corridor=cfg.tmaze_corridor, catch_drops=cfg.catch_drops)
        for _ in range(cfg.num_envs)])


class TrainingRun:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "checkpoints").mkdir(exist_ok=True)
        self.envs = build_envs(cfg)
        rng = Rng(cfg.seed, "run")
        self.agent = Agent(cfg, self.envs.obs_shape, self.envs.action_count,
                           rng.stream("init"))
        self.trainer = Trainer(self.agent, out_dir=self.out)
        self.carry = start_carry(self.agent, self.envs, rng.stream("collect"))
        self.stats = EpisodeStats()
        self.frames_seen = 0
        self.metrics = MetricsWriter(self.out / "metrics.jsonl")

    # -- checkpointing ----------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        arrays = {f"param.{k}": v for k, v in self.agent.param_arrays().items()}
        t_arrays, t_extra = self.trainer.get_state()
        arrays.update(t_arrays)
        for key, arr in self.carry.state.to_arrays().items():
            arrays[f"carry.state.{key}"] = arr
        arrays["carry.last_obs"] = self.carry.last_obs.astype(np.float64)
        try:
            env_states = to_jsonable(self.envs.get_state())
        except ConfigError:
            env_states = None
        extra = {
            "config": self.cfg.to_dict(),
            "trainer": t_extra,
            "frames_seen": self.frames_seen,
            "action_rngs": to_jsonable([r.get_state() for r in self.carry.action_rngs]),
            "env_states": env_states,
            "episode_stats": self.stats.get_state(),
        }
        save_arrays(path, arrays, extra)

    @classmethod
    def resume(cls, path: str | Path, batches_override: int | None = None) -> "TrainingRun":
        arrays, extra = load_arrays(path)
        cfg_dict = extra["config"]
        if batches_override is not None:
            cfg_dict = dict(cfg_dict, batches=batches_override)
        cfg = RunConfig(**cfg_dict)
        run = cls(cfg)
        run.agent.load_param_arrays(
            {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
        run.trainer.set_state(arrays, extra["trainer"])
        state_arrays = {key: np.asarray(arrays[f"carry.state.{key}"], dtype=run.agent.dtype)
                        for key in ("h", "c_h", "p", "c_p")}
        from .worldmodel import RecurrentState
        run.carry.state = RecurrentState.from_arrays(state_arrays)
        run.carry.last_obs = np.clip(np.rint(arrays["carry.last_obs"]), 0, 255).astype(np.uint8)
        for r, s in zip(run.carry.action_rngs, from_jsonable(extra["action_rngs"])):
            r.set_state(s)
        if extra.get("env_states") is not None:
            run.envs.set_state(from_jsonable(extra["env_states"]))
        else:
            print("warning: checkpoint has no environment state; environments reset",
                  file=sys.stderr)
        run.stats.set_state(extra["episode_stats"])
        run.frames_seen = int(extra["frames_seen"])
        run.metrics.truncate_from(run.trainer.batch_index)
        return run

    # -- the loop ---------------------------------------------------------

    def run(self, log=print) -> None:
        cfg = self.cfg
        save_config(cfg, self.out / "config.json")
        while self.trainer.batch_index < cfg.batches:
            t0 = time.monotonic()
            buf = collect(self.agent, self.envs, self.carry, cfg.batch_steps,
                          cfg.segment_len, self.stats)
            if cfg.dump_buffers:
                dump_dir = self.out / "buffers"
                dump_dir.mkdir(exist_ok=True)
                buf.dump(dump_dir / f"batch_{self.trainer.batch_index:05d}.npz")
            batch_metrics = self.trainer.train_on_batch(buf)
            self.frames_seen += cfg.samples_per_batch
            wall = 0.0 if cfg.deterministic else time.monotonic() - t0
            record = {
                "batch": batch_metrics["batch"],
                "frames": self.frames_seen,
                "episode_scores": buf.episode_scores,
                "episodes_completed_total": self.stats.completed,
                "rolling_mean": self.stats.rolling_mean(),
                "rolling_stderr": self.stats.rolling_stderr(),
                "loss_actor": batch_metrics["loss_actor"],
                "loss_critic": batch_metrics["loss_critic"],
                "loss_prediction": batch_metrics["loss_prediction"],
                "loss_total": batch_metrics["loss_total"],
                "entropy": batch_metrics["entropy"],
                "ratio_mean": batch_metrics["ratio_mean"],
                "clip_fraction": batch_metrics["clip_fraction"],
                "lr": batch_metrics["lr"],
                "wall_clock": wall,
                "steps": batch_metrics["steps"],
            }
            self.metrics.append(record)
            done_batches = self.trainer.batch_index
            if cfg.checkpoint_every > 0 and done_batches % cfg.checkpoint_every == 0:
                self.save_checkpoint(self.out / "checkpoints" / f"ckpt_{done_batches:06d}.ckpt")
                self.save_checkpoint(self.out / "checkpoints" / "ckpt_latest.ckpt")
            if log is not None:
                rm = record["rolling_mean"]
                log(f"batch {record['batch']:5d}  frames {record['frames']:>9d}  "
                    f"rolling {rm if rm is None else f'{rm:7.3f}'}  "
                    f"L_pred {record['loss_prediction']:.5f}  "
                    f"L_total {record['loss_total']:.5f}")
        self.save_checkpoint(self.out / "checkpoints" / "ckpt_latest.ckpt")
        self.finalize_reports()

    def finalize_reports(self) -> None:
        rows = read_metrics(self.out / "metrics.jsonl")
        write_curve_csv(rows, self.out / "curve.csv")
        save_learning_curve(rows, self.out / "curve.png",
                            title=f"{self.cfg.env} / {self.cfg.variant} / seed {self.cfg.seed}")


def agent_from_checkpoint(path: str | Path, precision: int | None = None
                          ) -> tuple[Agent, RunConfig]:
    """Rebuild an agent (and its config) from a checkpoint for evaluation
    and diagnostics."""
    arrays, extra = load_arrays(path)
    cfg_dict = dict(extra["config"])
    if precision is not None:
        cfg_dict["precision"] = precision
    cfg = RunConfig(**cfg_dict)
    probe = make_env(cfg.env, sticky=cfg.sticky, frame_stack=cfg.frame_stack,
                     tmaze_corridor=cfg.tmaze_corridor, catch_drops=cfg.catch_drops)
    agent = Agent(cfg, probe.obs_shape, probe.action_count, Rng(cfg.seed, "init"))
    probe.close()
    try:
        agent.load_param_arrays(
            {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    except ValueError as exc:
        raise ConfigError(f"checkpoint/config mismatch: {exc}") from exc
    return agent, cfg


def evaluate(checkpoint: str | Path, mode: str, episodes: int, seed: int = 0,
             max_steps_per_episode: int = 100_000) -> dict:
    """Play `episodes` full episodes; `deterministic` takes the argmax
    action, `stochastic` samples. Reports per-episode scores and summary."""
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    if mode not in ("stochastic", "deterministic"):
        raise ConfigError(f"mode must be stochastic|deterministic, got {mode!r}")
    agent, cfg = agent_from_checkpoint(checkpoint)
    env = make_env(cfg.env, sticky=cfg.sticky, frame_stack=cfg.frame_stack,
                   tmaze_corridor=cfg.tmaze_corridor, catch_drops=cfg.catch_drops)
    rng = Rng(seed, "eval")
    scores = []
    try:
        for ep in range(episodes):
            obs = env.reset(int(rng.stream("episode", ep).integers(0, 2**63)))
            state = agent.initial_state(1)
            action_rng = [rng.stream("action", ep)]
            total = 0.0
            for _ in range(max_steps_per_episode):
                out = agent.act(obs[None], state, action_rng,
                                deterministic=(mode == "deterministic"))
                step = env.step(int(out["actions"][0]))
                total += step.reward
                if step.terminal:
                    break
                obs = step.observation
                state = out["state"]
            scores.append(total)
    finally:
        env.close()
    return {"mode": mode, "episodes": episodes, "scores": scores,
            "mean": float(np.mean(scores)), "min": float(np.min(scores)),
            "max": float(np.max(scores))}
