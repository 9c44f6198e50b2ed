"""Residual convolutional encoder and actor-critic heads.

The encoder maps a stack of frames to a bounded latent vector: four layer
groups, each [conv -> 2x2 max pool -> two residual blocks of two convs],
followed by one fully-connected layer and a tanh. All convolutions are 3x3,
stride 1, padding 1; pooling uses ceiling division with bottom/right zero
padding, so an 84x84 input shrinks 84 -> 42 -> 21 -> 11 -> 6.

At the default configuration (4 input channels, groups [24, 32, 64, 128],
latent 512) the encoder has 3,255,864 parameters, about 1.3% under the
3.3M figure the architecture targets.

Residual blocks use pre-activation ordering: out = x + conv(relu(conv(relu(x)))).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .errors import ConfigError
from .initializers import fan_in_uniform, zeros
from .rng import Rng


@dataclass
class EncoderConfig:
    channels_per_group: list[int] = field(default_factory=lambda: [24, 32, 64, 128])
    latent_dim: int = 512
    input_shape: tuple[int, int, int] = (4, 84, 84)

    def __post_init__(self):
        if len(self.channels_per_group) != 4:
            raise ConfigError(f"encoder needs exactly 4 groups, got {self.channels_per_group}")
        if any(c <= 0 for c in self.channels_per_group):
            raise ConfigError(f"channel counts must be positive: {self.channels_per_group}")
        if self.latent_dim <= 0:
            raise ConfigError(f"latent_dim must be positive, got {self.latent_dim}")
        c, h, w = self.input_shape
        if min(h, w) < 16:
            raise ConfigError(
                f"input spatial size {h}x{w} too small; four pooling stages need >= 16")

    def spatial_after_pools(self) -> tuple[int, int]:
        _, h, w = self.input_shape
        for _ in range(4):
            h, w = (h + 1) // 2, (w + 1) // 2
        return h, w

    def flat_dim(self) -> int:
        h, w = self.spatial_after_pools()
        return self.channels_per_group[-1] * h * w


def toy_encoder_config(frame_stack: int = 4, side: int = 16) -> EncoderConfig:
    """Reduced preset used by the fast test/experiment path; structurally
    identical to the full-scale encoder."""
    return EncoderConfig(channels_per_group=[4, 8, 8, 8], latent_dim=32,
                         input_shape=(frame_stack, side, side))


def _conv_layer(x: DiffArray, w: DiffArray, b: DiffArray) -> DiffArray:
    return ad.add(ad.conv2d(x, w), b)


def residual_block(x: DiffArray, w1: DiffArray, b1: DiffArray,
                   w2: DiffArray, b2: DiffArray) -> DiffArray:
    """Pre-activation residual block; channel count must be preserved."""
    if w1.shape[0] != w1.shape[1] or w2.shape[0] != w2.shape[1]:
        raise ConfigError(f"residual block needs equal in/out channels, got {w1.shape}, {w2.shape}")
    y = _conv_layer(ad.relu(x), w1, b1)
    y = _conv_layer(ad.relu(y), w2, b2)
    return ad.add(x, y)


class Encoder:
    """Latent encoder over pixel observations already scaled to [0, 1]."""

    def __init__(self, cfg: EncoderConfig, rng: Rng, dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        self.params: dict[str, DiffArray] = {}
        c_in = cfg.input_shape[0]
        init = rng.stream("encoder")
        for g, c_out in enumerate(cfg.channels_per_group, start=1):
            self._add_conv(init, f"g{g}.conv", c_out, c_in)
            for r in (1, 2):
                self._add_conv(init, f"g{g}.res{r}.conv1", c_out, c_out)
                self._add_conv(init, f"g{g}.res{r}.conv2", c_out, c_out)
            c_in = c_out
        flat = cfg.flat_dim()
        self.params["fc.w"] = ad.parameter(
            fan_in_uniform(init.stream("fc.w"), (cfg.latent_dim, flat)), "fc.w", dtype)
        self.params["fc.b"] = ad.parameter(zeros((cfg.latent_dim,)), "fc.b", dtype)

    def _add_conv(self, init: Rng, name: str, c_out: int, c_in: int) -> None:
        self.params[f"{name}.w"] = ad.parameter(
            fan_in_uniform(init.stream(f"{name}.w"), (c_out, c_in, 3, 3)), f"{name}.w", self.dtype)
        self.params[f"{name}.b"] = ad.parameter(
            zeros((c_out, 1, 1)), f"{name}.b", self.dtype)

    def encode(self, frames: DiffArray) -> DiffArray:
        """(B, C, H, W) scaled frames -> (B, latent_dim) values in (-1, 1)."""
        p = self.params
        x = frames
        for g in range(1, 5):
            x = _conv_layer(x, p[f"g{g}.conv.w"], p[f"g{g}.conv.b"])
            x = ad.maxpool2(x)
            for r in (1, 2):
                x = residual_block(x, p[f"g{g}.res{r}.conv1.w"], p[f"g{g}.res{r}.conv1.b"],
                                   p[f"g{g}.res{r}.conv2.w"], p[f"g{g}.res{r}.conv2.b"])
        b = x.shape[0]
        x = ad.reshape(x, (b, self.cfg.flat_dim()))
        x = ad.linear(x, p["fc.w"], p["fc.b"])
        return ad.tanh(x)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass
class PolicyOutput:
    """Categorical action distribution and state value for a batch of steps."""
    logits: DiffArray   # (B, A)
    probs: DiffArray    # (B, A), rows sum to 1
    value: DiffArray    # (B,)


class ActorCritic:
    """One linear layer to action logits, one to a scalar value; both read
    the same combined recurrent state of size k."""

    def __init__(self, state_dim: int, action_count: int, rng: Rng, dtype=np.float64):
        if state_dim <= 0 or action_count <= 0:
            raise ConfigError(f"bad head sizes: state {state_dim}, actions {action_count}")
        self.state_dim = state_dim
        self.action_count = action_count
        init = rng.stream("heads")
        self.params = {
            "actor.w": ad.parameter(fan_in_uniform(init.stream("actor.w"),
                                                   (action_count, state_dim)), "actor.w", dtype),
            "actor.b": ad.parameter(zeros((action_count,)), "actor.b", dtype),
            "critic.w": ad.parameter(fan_in_uniform(init.stream("critic.w"),
                                                    (1, state_dim)), "critic.w", dtype),
            "critic.b": ad.parameter(zeros((1,)), "critic.b", dtype),
        }

    def act_value(self, state: DiffArray) -> PolicyOutput:
        if state.shape[1] != self.state_dim:
            raise ad.DimensionError(
                f"act_value: state dim {state.shape} vs heads built for {self.state_dim}")
        logits = ad.linear(state, self.params["actor.w"], self.params["actor.b"])
        probs = ad.softmax(logits, axis=1)
        value = ad.reshape(ad.linear(state, self.params["critic.w"], self.params["critic.b"]),
                           (state.shape[0],))
        return PolicyOutput(logits=logits, probs=probs, value=value)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())
