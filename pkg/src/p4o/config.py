"""Run configuration: one flat, typed key-value namespace.

Sources merge with precedence  flags > environment variables > config file >
preset > built-in defaults. The config file is a flat JSON object; environment
variables use the prefix ``P4O_`` with upper-cased key names (P4O_SEED=3).
Unknown keys are rejected everywhere.

The ``preset`` key picks architecture defaults: ``toy`` is the reduced
16x16 configuration (channels [4, 8, 8, 8], populations of 32) that runs the
whole pipeline in seconds; ``full`` is the 84x84 configuration (channels
[24, 32, 64, 128], populations of 512). ``auto`` resolves to ``toy`` for the
built-in toy environments and ``full`` otherwise. Explicitly set keys always
beat the preset.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

VARIANTS = ("p4o", "p4o-no-pp", "lstm-ppo-1024", "lstm-ppo-800")

TOY_PRESET = {"encoder_channels": [4, 8, 8, 8], "latent_dim": 32, "belief_dim": 32,
              "baseline_k": 64}
FULL_PRESET = {"encoder_channels": [24, 32, 64, 128], "latent_dim": 512, "belief_dim": 512,
               "baseline_k": 0}


@dataclass
class RunConfig:
    # run identity
    variant: str = "p4o"
    env: str = "pixelcatch"
    seed: int = 0
    batches: int = 100
    out: str = "runs/default"
    precision: int = 32
    deterministic: bool = False
    preset: str = "auto"

    # environment wrappers
    frame_stack: int = 4
    sticky: float = 0.0
    tmaze_corridor: int = 5
    catch_drops: int = 1

    # architecture
    encoder_channels: list[int] = field(default_factory=lambda: [24, 32, 64, 128])
    latent_dim: int = 512
    belief_dim: int = 512
    baseline_k: int = 0  # 0 = take from the variant name (1024 / 800)
    horizon: int = 3

    # optimization
    num_envs: int = 16
    batch_steps: int = 125
    epochs: int = 4
    minibatches: int = 5
    lr: float = 2.5e-4
    lr_decay: str = "short"
    adam_eps: float = 1e-5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.1

    # loss coefficients
    c_actor: float = 1.0
    c_critic: float = 0.5
    c_pred: float = 1.0
    c_entropy: float = 0.02
    l1_coef: float = 0.1
    l1_enabled: bool = False

    # training options
    advantage_normalization: bool = True
    grad_clip: float = 0.5
    refresh_advantages_per_update: bool = False
    detach_prediction_targets: bool = False
    entropy_coef_decay: float = 1.0

    # persistence
    checkpoint_every: int = 50
    dump_buffers: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.lr_decay not in ("short", "long"):
            raise ConfigError(f"lr_decay must be 'short' or 'long', got {self.lr_decay!r}")
        if self.preset not in ("auto", "toy", "full"):
            raise ConfigError(f"preset must be auto/toy/full, got {self.preset!r}")
        if self.clip_eps <= 0:
            raise ConfigError("clip_eps must be positive")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ConfigError("gamma and gae_lambda must lie in [0, 1]")
        if self.batch_steps % self.minibatches != 0:
            raise ConfigError(
                f"batch_steps ({self.batch_steps}) must split into {self.minibatches} "
                "contiguous time segments")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.num_envs < 1 or self.batch_steps < 1:
            raise ConfigError("need at least one environment and one batch step")

    @property
    def segment_len(self) -> int:
        return self.batch_steps // self.minibatches

    @property
    def minibatch_size(self) -> int:
        return self.segment_len * self.num_envs

    @property
    def samples_per_batch(self) -> int:
        return self.num_envs * self.batch_steps

    def effective_baseline_k(self) -> int:
        if self.baseline_k > 0:
            return self.baseline_k
        if self.variant == "lstm-ppo-800":
            return 800
        return 1024

    def uses_prediction(self) -> bool:
        return self.variant in ("p4o", "p4o-no-pp")

    def effective_c_pred(self) -> float:
        # the no-pp ablation keeps the prediction loss monitored but unweighted
        if self.variant == "p4o-no-pp" or not self.uses_prediction():
            return 0.0
        return self.c_pred

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, value, target_type):
    if target_type is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
        raise ConfigError(f"cannot parse boolean for {key!r}: {value!r}")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    if target_type is str:
        return str(value)
    if target_type == list[int] or target_type == "list[int]":
        if isinstance(value, str):
            value = json.loads(value)
        return [int(v) for v in value]
    return value


def _check_keys(source: str, mapping: dict) -> None:
    unknown = sorted(set(mapping) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys in {source}: {', '.join(unknown)}")


def _env_overrides() -> dict:
    found = {}
    for name in _FIELDS:
        raw = os.environ.get(f"P4O_{name.upper()}")
        if raw is not None:
            found[name] = raw
    return found


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, preset, config file, P4O_* environment variables and
    explicit overrides (CLI flags) into a validated RunConfig."""
    file_values: dict = {}
    if path is not None:
        try:
            file_values = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        if not isinstance(file_values, dict):
            raise ConfigError(f"config file {path} must hold one flat JSON object")
        _check_keys(f"config file {path}", file_values)
    env_values = _env_overrides()
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    _check_keys("overrides", overrides)

    explicit: dict = {}
    for source in (file_values, env_values, overrides):
        for key, value in source.items():
            ann = _FIELDS[key].type
            target = {"int": int, "float": float, "str": str, "bool": bool,
                      "list[int]": list[int]}.get(ann, ann)
            explicit[key] = _coerce(key, value, target)

    merged = {}
    preset_name = explicit.get("preset", "auto")
    env_name = explicit.get("env", RunConfig.env)
    if preset_name == "auto":
        preset = TOY_PRESET if env_name in ("pixelcatch", "tmaze") else FULL_PRESET
    else:
        preset = TOY_PRESET if preset_name == "toy" else FULL_PRESET
    merged.update(preset)
    merged.update(explicit)
    return RunConfig(**merged)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
