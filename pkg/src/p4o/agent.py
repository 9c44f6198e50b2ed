"""Agent assembly: encoder, recurrent world model and actor-critic heads,
wired per variant.

Variants:
    p4o            predictive-coding LSTM, prediction loss active
    p4o-no-pp      same architecture, prediction loss weighted zero
    lstm-ppo-1024  plain LSTM with k = 1024 (or the configured baseline_k)
    lstm-ppo-800   plain LSTM with k = 800  (or the configured baseline_k)
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray, NumericError
from .config import RunConfig
from .networks import ActorCritic, Encoder, EncoderConfig, PolicyOutput
from .rng import Rng, categorical_sample
from .worldmodel import BaselineLstm, PcLstm, RecurrentState, StepOutput


class Agent:
    def __init__(self, cfg: RunConfig, obs_shape: tuple[int, int, int],
                 action_count: int, rng: Rng):
        self.cfg = cfg
        self.dtype = np.float64 if cfg.precision == 64 else np.float32
        self.obs_shape = obs_shape
        self.action_count = action_count
        enc_cfg = EncoderConfig(channels_per_group=list(cfg.encoder_channels),
                                latent_dim=cfg.latent_dim, input_shape=obs_shape)
        self.encoder = Encoder(enc_cfg, rng, self.dtype)
        if cfg.uses_prediction():
            self.world_model: PcLstm | BaselineLstm = PcLstm(
                cfg.latent_dim, cfg.belief_dim, rng, self.dtype)
            state_dim = cfg.latent_dim + cfg.belief_dim
        else:
            self.world_model = BaselineLstm(cfg.latent_dim, cfg.effective_baseline_k(),
                                            rng, self.dtype)
            state_dim = cfg.effective_baseline_k()
        self.state_dim = state_dim
        self.heads = ActorCritic(state_dim, action_count, rng, self.dtype)

    # -- parameters ------------------------------------------------------

    @property
    def params(self) -> dict[str, DiffArray]:
        merged: dict[str, DiffArray] = {}
        for prefix, module in (("enc", self.encoder), ("wm", self.world_model),
                               ("heads", self.heads)):
            for name, p in module.params.items():
                merged[f"{prefix}.{name}"] = p
        return merged

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.params
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ValueError(f"checkpoint missing parameters: {missing[:5]}...")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=self.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data[...] = arr

    # -- forward pieces ----------------------------------------------------

    def obs_to_input(self, obs: np.ndarray) -> DiffArray:
        """uint8 (B, C, H, W) -> scaled floats in [0, 1]."""
        return DiffArray(obs.astype(self.dtype) / np.asarray(255.0, dtype=self.dtype))

    def initial_state(self, batch: int) -> RecurrentState:
        return self.world_model.initial_state(batch)

    def step(self, latents: DiffArray, state: RecurrentState) -> StepOutput:
        return self.world_model.step(latents, state)

    def policy(self, combined: DiffArray) -> PolicyOutput:
        return self.heads.act_value(combined)

    # -- acting ------------------------------------------------------------

    def act(self, obs: np.ndarray, state: RecurrentState,
            action_rngs: list[Rng] | None, deterministic: bool = False) -> dict:
        """One no-grad acting step for a batch of environments.

        Returns actions, log-probabilities, values, the latent, the step
        output and the new recurrent state (not yet masked for terminals).
        """
        with ad.no_grad():
            latent = self.encoder.encode(self.obs_to_input(obs))
            out = self.world_model.step(latent, state)
            pol = self.heads.act_value(out.combined)
            logits = pol.logits.data
            if not np.isfinite(logits).all():
                raise NumericError("act: non-finite policy logits")
            logp_all = logits - logits.max(axis=1, keepdims=True)
            logp_all = logp_all - np.log(np.exp(logp_all).sum(axis=1, keepdims=True))
            if deterministic:
                actions = np.argmax(pol.probs.data, axis=1).astype(np.int64)
            else:
                actions = np.array([categorical_sample(logits[i], action_rngs[i])
                                    for i in range(obs.shape[0])], dtype=np.int64)
            logp = logp_all[np.arange(obs.shape[0]), actions]
        return {"actions": actions, "logp": logp, "value": pol.value.data.copy(),
                "latent": latent.data.copy(), "step": out, "state": out.state,
                "prev_prediction": state.p.data.copy(), "error": out.error.data.copy()}

    def snapshot_id(self) -> str:
        """Cheap content identifier for the current parameter vector."""
        acc = 0
        for name in sorted(self.params):
            acc = (acc * 1000003 + hash(self.params[name].data.tobytes())) & 0xFFFFFFFFFFFF
        return f"{acc:012x}"
