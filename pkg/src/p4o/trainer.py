"""Loss functions and the epoch/minibatch optimization loop.

Per batch: for each of `epochs` epochs, refresh advantages, then sweep the
minibatch segments in time order; every segment builds one BPTT graph over
its contiguous steps (re-encoding observations so the encoder trains), takes
one Adam step, and refreshes the buffer's hidden states. 20 optimizer steps
per batch at the defaults.

The first update of a batch is anchored to the second-to-last policy: the
parameter vector captured just before the previous batch's final optimizer
step. Its log-probabilities for the new batch's first segment are computed
by replaying the stored latents under the captured parameters, mirroring the
hidden-state refresh path. On the very first batch of a run no such policy
exists and the standard unconstrained first update happens once.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray, NumericError
from .agent import Agent
from .rollout import RolloutBuffer, refresh_advantages, refresh_hidden_states
from .worldmodel import RecurrentState


# ------------------------------------------------------------- losses


def actor_loss(logp_new: DiffArray, logp_anchor: DiffArray, advantages: DiffArray,
               eps: float) -> DiffArray:
    """Clipped surrogate: -mean(min(r * A, clip(r, 1-eps, 1+eps) * A)) with
    r = exp(logp_new - logp_anchor)."""
    ratio = ad.exp(ad.sub(logp_new, logp_anchor))
    if not np.isfinite(ratio.data).all():
        raise NumericError("actor_loss: non-finite probability ratio")
    surr = ad.mul(ratio, advantages)
    surr_clipped = ad.mul(ad.clip(ratio, 1.0 - eps, 1.0 + eps), advantages)
    return ad.mul(ad.mean(ad.minimum(surr, surr_clipped)), -1.0)


def critic_loss(v_new: DiffArray, v_old: DiffArray, returns: DiffArray,
                eps: float) -> DiffArray:
    """Clipped absolute value error: the value estimate may move at most eps
    from its acting-time anchor, and the pessimistic (max) branch is taken:

        v_clip = v_old + clamp(v_new - v_old, -eps, +eps)
        L = mean(max(|v_new - R|, |v_clip - R|))
    """
    v_clip = ad.add(ad.clip(ad.sub(v_new, v_old), -eps, eps), v_old)
    err = ad.absolute(ad.sub(v_new, returns))
    err_clip = ad.absolute(ad.sub(v_clip, returns))
    return ad.mean(ad.maximum(err, err_clip))


def entropy_bonus(probs: DiffArray, log_probs: DiffArray | None = None) -> DiffArray:
    """-mean(H(pi)); minimizing this with a positive coefficient maximizes
    entropy. Pass log_probs (from log_softmax) for a numerically exact
    gradient; otherwise a floored log of probs is used."""
    if log_probs is None:
        tiny = np.finfo(probs.dtype).tiny
        log_probs = ad.log(ad.clip(probs, tiny, 1.0))
    ent_rows = ad.mul(ad.sum_(ad.mul(probs, log_probs), axis=1), -1.0)
    return ad.mul(ad.mean(ent_rows), -1.0)


def combined_loss(actor: DiffArray, critic: DiffArray, prediction: DiffArray | float,
                  entropy: DiffArray, c_actor: float, c_critic: float, c_pred: float,
                  c_entropy: float, l1: DiffArray | None = None,
                  c_l1: float = 0.0) -> DiffArray:
    total = ad.add(ad.mul(actor, c_actor), ad.mul(critic, c_critic))
    if isinstance(prediction, DiffArray):
        total = ad.add(total, ad.mul(prediction, c_pred))
    total = ad.add(total, ad.mul(entropy, c_entropy))
    if l1 is not None and c_l1 != 0.0:
        total = ad.add(total, ad.mul(l1, c_l1))
    return total


def lr_schedule(batch_index: int, variant: str, lr0: float = 2.5e-4) -> float:
    """Learning-rate decay. `short` shrinks linearly by 1e-4 per batch,
    `long` multiplies by 0.995 every 100 batches. Floors are the ratios
    2.5e-8 / 2.5e-4 and 5e-6 / 2.5e-4 of the base rate, so a base rate of
    zero stays zero."""
    if batch_index < 0:
        raise ValueError(f"batch_index must be >= 0, got {batch_index}")
    if variant == "short":
        return lr0 * max(1.0 - batch_index * 1e-4, 1e-4)
    if variant == "long":
        return lr0 * max(0.995 ** (batch_index // 100), 0.02)
    raise ValueError(f"unknown lr decay variant {variant!r}")


@dataclass
class LossBreakdown:
    actor: float
    critic: float
    prediction: float
    entropy: float
    l1: float
    total: float

    def finite(self) -> bool:
        return all(np.isfinite(v) for v in
                   (self.actor, self.critic, self.prediction, self.entropy,
                    self.l1, self.total))


# ------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params: dict[str, DiffArray], eps: float = 1e-5,
                 beta1: float = 0.9, beta2: float = 0.999):
        self.eps = eps
        self.beta1 = beta1
        self.beta2 = beta2
        self.t = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()}

    def step(self, params: dict[str, DiffArray], lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name in sorted(params):
            p = params[name]
            g = np.zeros_like(p.data, dtype=np.float64) if p.grad is None \
                else p.grad.astype(np.float64)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / b1c
            v_hat = self.v[name] / b2c
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def get_state(self) -> dict[str, np.ndarray]:
        arrays = {"t": np.array([self.t], dtype=np.float64)}
        for k in self.m:
            arrays[f"m.{k}"] = self.m[k]
            arrays[f"v.{k}"] = self.v[k]
        return arrays

    def set_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])
        for k in self.m:
            self.m[k] = np.asarray(arrays[f"m.{k}"], dtype=np.float64).reshape(self.m[k].shape)
            self.v[k] = np.asarray(arrays[f"v.{k}"], dtype=np.float64).reshape(self.v[k].shape)


def clip_global_norm(params: dict[str, DiffArray], max_norm: float) -> float:
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(sq))
    if max_norm > 0.0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= np.asarray(scale, dtype=p.grad.dtype)
    return norm


# ------------------------------------------------------------- trainer


def normalize_advantages(adv: np.ndarray, enabled: bool) -> np.ndarray:
    if not enabled:
        return adv
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8)


class Trainer:
    def __init__(self, agent: Agent, out_dir=None):
        self.agent = agent
        self.cfg = agent.cfg
        self.optimizer = Adam(agent.params, eps=self.cfg.adam_eps)
        self.batch_index = 0
        self.anchor_params: dict[str, np.ndarray] | None = None
        self.out_dir = out_dir

    # -- anchoring -------------------------------------------------------

    def _compute_anchor_logp(self, buffer: RolloutBuffer) -> np.ndarray:
        """Log-probs of the buffer's first-segment actions under the stored
        second-to-last policy, via the same stored-latent replay the refresh
        procedures use."""
        agent = self.agent
        seg_len = self.cfg.segment_len
        params = agent.params
        live = {name: p.data for name, p in params.items()}
        try:
            for name, p in params.items():
                p.data = np.asarray(self.anchor_params[name], dtype=agent.dtype)
            with ad.no_grad():
                state = RecurrentState.from_arrays(buffer.batch_start_state, dtype=agent.dtype)
                n = buffer.num_envs
                out_logp = np.zeros((n, seg_len), dtype=np.float64)
                for t in range(seg_len):
                    out = agent.step(DiffArray(buffer.latents[:, t], dtype=agent.dtype), state)
                    logits = agent.policy(out.combined).logits.data
                    z = logits - logits.max(axis=1, keepdims=True)
                    lsm = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
                    out_logp[:, t] = lsm[np.arange(n), buffer.actions[:, t]]
                    keep = 1.0 - buffer.terminals[:, t].astype(agent.dtype).reshape(-1, 1)
                    state = out.state.masked(keep)
        finally:
            for name, p in params.items():
                p.data = live[name]
        return out_logp

    # -- minibatch forward -------------------------------------------------

    def _segment_forward(self, buffer: RolloutBuffer, seg: int, first_update: bool):
        agent = self.agent
        cfg = self.cfg
        n = buffer.num_envs
        s_len = cfg.segment_len
        sl = buffer.segment_slice(seg, s_len)
        dones = buffer.terminals[:, sl]                      # (N, S)

        # time-major frame batch so per-step latents are contiguous slices
        obs = buffer.observations[:, sl].transpose(1, 0, 2, 3, 4)
        frames = np.ascontiguousarray(obs.reshape(s_len * n, *agent.obs_shape))
        latents_all = agent.encoder.encode(agent.obs_to_input(frames))

        state = RecurrentState.from_arrays(buffer.boundary_states[seg], dtype=agent.dtype)
        states = []
        combined = []
        for t in range(s_len):
            x_t = ad.narrow(latents_all, 0, t * n, n)
            out = agent.step(x_t, state)
            states.append(out.state)
            combined.append(out.combined)
            if t < s_len - 1:
                keep = 1.0 - dones[:, t].astype(agent.dtype).reshape(-1, 1)
                state = out.state.masked(keep)

        combined_all = ad.concat(combined, axis=0)           # (S*N, k)
        pol = agent.policy(combined_all)
        log_sm = ad.log_softmax(pol.logits, axis=1)

        flat = lambda a: np.ascontiguousarray(a[:, sl].T.reshape(-1))
        actions_flat = flat(buffer.actions)
        logp_new = ad.gather_rows(log_sm, actions_flat)

        if first_update and seg == 0 and buffer.anchor_logp is not None:
            anchor = buffer.anchor_logp.T.reshape(-1)
        else:
            anchor = flat(buffer.logp)
        anchor_d = DiffArray(anchor, dtype=agent.dtype)

        adv = normalize_advantages(flat(buffer.advantages), cfg.advantage_normalization)
        adv_d = DiffArray(adv, dtype=agent.dtype)
        l_actor = actor_loss(logp_new, anchor_d, adv_d, cfg.clip_eps)

        v_old = DiffArray(flat(buffer.values), dtype=agent.dtype)
        rets = DiffArray(flat(buffer.returns), dtype=agent.dtype)
        l_critic = critic_loss(pol.value, v_old, rets, cfg.clip_eps)

        l_entropy = entropy_bonus(pol.probs, log_sm)

        c_pred = cfg.effective_c_pred()
        if cfg.uses_prediction():
            if c_pred != 0.0:
                l_pred = self._prediction_term(states, latents_all, dones, n, s_len)
            else:
                with ad.no_grad():  # monitored but unweighted
                    l_pred = self._prediction_term(states, latents_all, dones, n, s_len)
        else:
            l_pred = DiffArray(np.zeros((), dtype=agent.dtype))

        l1 = ad.mean(ad.absolute(combined_all)) if cfg.l1_enabled else None
        c_ent = cfg.c_entropy * (cfg.entropy_coef_decay ** self.batch_index)
        total = combined_loss(l_actor, l_critic,
                              l_pred if c_pred != 0.0 else float(l_pred.data),
                              l_entropy, cfg.c_actor, cfg.c_critic, c_pred, c_ent,
                              l1=l1, c_l1=cfg.l1_coef if cfg.l1_enabled else 0.0)

        with np.errstate(over="ignore"):
            ratio = np.exp(logp_new.data.astype(np.float64) - anchor)
        breakdown = LossBreakdown(
            actor=float(l_actor.data), critic=float(l_critic.data),
            prediction=float(l_pred.data), entropy=float(l_entropy.data),
            l1=float(l1.data) if l1 is not None else 0.0, total=float(total.data))
        stats = {
            "entropy": -breakdown.entropy,
            "ratio_mean": float(ratio.mean()),
            "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
        }
        return total, breakdown, stats

    def _prediction_term(self, states, latents_all: DiffArray, dones: np.ndarray,
                         n: int, s_len: int) -> DiffArray:
        """Sum over horizon levels of masked per-sample squared prediction
        errors, averaged over the S*N anchor samples.

        Level i forecasts the latent i steps ahead: level 1 uses each step's
        own prediction output, deeper levels unroll open loop (error input
        zero) from every anchor state at once. Terms whose window crosses an
        episode terminal are dropped, as are anchors with fewer than i
        future latents inside the segment.
        """
        agent = self.agent
        cfg = self.cfg
        p_dim = agent.cfg.latent_dim
        # prefix[b, t] = number of terminals strictly before segment step t
        prefix = np.concatenate([np.zeros((n, 1)), np.cumsum(dones, axis=1)], axis=1)

        stacked = RecurrentState(
            h=ad.concat([s.h for s in states], axis=0),
            c_h=ad.concat([s.c_h for s in states], axis=0),
            p=ad.concat([s.p for s in states], axis=0),
            c_p=ad.concat([s.c_p for s in states], axis=0))
        total = None
        level_pred = stacked.p
        cur = stacked
        for i in range(1, cfg.horizon + 1):
            if i > 1:
                cur = agent.world_model.open_loop_step(cur)
                level_pred = cur.p
            rows = (s_len - i) * n
            if rows <= 0:
                break
            preds = ad.narrow(level_pred, 0, 0, rows)
            if cfg.detach_prediction_targets:
                target = DiffArray(latents_all.data[i * n:i * n + rows])
            else:
                target = ad.narrow(latents_all, 0, i * n, rows)
            # valid iff no terminal in steps t .. t+i-1
            valid = (prefix[:, i:s_len] - prefix[:, 0:s_len - i]) == 0  # (N, S-i)
            mask = np.ascontiguousarray(valid.T.reshape(-1)).astype(agent.dtype)
            sq = ad.square(ad.sub(preds, target))
            per_sample = ad.mul(ad.sum_(sq, axis=1), 1.0 / p_dim)
            term = ad.sum_(ad.mul(per_sample, DiffArray(mask)))
            total = term if total is None else ad.add(total, term)
        if total is None:
            return DiffArray(np.zeros((), dtype=agent.dtype))
        return ad.mul(total, 1.0 / (s_len * n))

    # -- batch loop ----------------------------------------------------------

    def train_on_batch(self, buffer: RolloutBuffer) -> dict:
        agent = self.agent
        cfg = self.cfg
        seg_len = cfg.segment_len
        lr = lr_schedule(self.batch_index, cfg.lr_decay, cfg.lr)
        if self.anchor_params is not None:
            buffer.anchor_logp = self._compute_anchor_logp(buffer)

        t0 = time.monotonic()
        step_records = []
        next_anchor = None
        update_index = 0
        total_updates = cfg.epochs * cfg.minibatches
        for _epoch in range(cfg.epochs):
            if not cfg.refresh_advantages_per_update:
                refresh_advantages(agent, buffer, seg_len)
            for seg in range(cfg.minibatches):
                if cfg.refresh_advantages_per_update:
                    refresh_advantages(agent, buffer, seg_len)
                total, breakdown, stats = self._segment_forward(
                    buffer, seg, first_update=(update_index == 0))
                if not breakdown.finite():
                    self._diagnostic_dump(buffer, breakdown)
                    raise NumericError(f"non-finite loss at batch {self.batch_index}, "
                                       f"update {update_index}: {breakdown}")
                ad.zero_grads(agent.params.values())
                total.backward()
                grad_norm = clip_global_norm(agent.params, cfg.grad_clip)
                if update_index == total_updates - 1:
                    next_anchor = agent.param_arrays()  # second-to-last policy
                self.optimizer.step(agent.params, lr)
                refresh_hidden_states(agent, buffer, seg_len)
                step_records.append({
                    "update": update_index, "lr": lr, "grad_norm": grad_norm,
                    "actor": breakdown.actor, "critic": breakdown.critic,
                    "prediction": breakdown.prediction, "entropy_term": breakdown.entropy,
                    "l1": breakdown.l1, "total": breakdown.total, **stats})
                update_index += 1
        self.anchor_params = next_anchor
        self.batch_index += 1

        agg = {key: float(np.mean([r[key] for r in step_records]))
               for key in ("actor", "critic", "prediction", "entropy", "total",
                           "ratio_mean", "clip_fraction")}
        return {"batch": self.batch_index - 1, "lr": lr,
                "optimizer_steps": len(step_records), "steps": step_records,
                "seconds": time.monotonic() - t0, **{f"loss_{k}" if k in
                ("actor", "critic", "prediction", "total") else k: v
                for k, v in agg.items()}}

    def _diagnostic_dump(self, buffer: RolloutBuffer, breakdown: LossBreakdown) -> None:
        if self.out_dir is None:
            return
        try:
            from pathlib import Path
            path = Path(self.out_dir) / f"diagnostic_batch_{self.batch_index}.npz"
            buffer.dump(path)
        except OSError:
            pass

    # -- checkpoint participation -----------------------------------------

    def get_state(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {f"opt.{k}": v for k, v in self.optimizer.get_state().items()}
        if self.anchor_params is not None:
            arrays.update({f"anchor.{k}": v for k, v in self.anchor_params.items()})
        extra = {"batch_index": self.batch_index,
                 "has_anchor": self.anchor_params is not None}
        return arrays, extra

    def set_state(self, arrays: dict[str, np.ndarray], extra: dict) -> None:
        self.batch_index = int(extra["batch_index"])
        opt_arrays = {k[len("opt."):]: v for k, v in arrays.items() if k.startswith("opt.")}
        self.optimizer.set_state(opt_arrays)
        if extra.get("has_anchor"):
            self.anchor_params = {k[len("anchor."):]: np.asarray(v)
                                  for k, v in arrays.items() if k.startswith("anchor.")}
        else:
            self.anchor_params = None
