"""Latent-space diagnostics: activation histograms and prediction accuracy.

The coefficient of determination measures how much latent variance the world
model's one-step-back prediction explains, pooled over dimensions:

    R^2 = 1 - SS_res / SS_tot,
    SS_res = sum((prediction - latent)^2),
    SS_tot = sum((latent - per-dimension latent mean)^2).

Fully trained large-scale agents have been observed around R^2 = 0.89; the
desk-scale value is reported alongside that reference, not matched to it.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from .agent import Agent
from .envs import Env
from .rng import Rng

FULL_SCALE_REFERENCE_R2 = 0.89
HISTOGRAM_BINS = 40


def r_squared(predictions: np.ndarray, latents: np.ndarray) -> float | None:
    """Pooled-over-dimensions R^2 of prediction vs latent; None (with a
    warning) when the latents carry no variance."""
    predictions = np.asarray(predictions, dtype=np.float64)
    latents = np.asarray(latents, dtype=np.float64)
    ss_res = float(np.sum((predictions - latents) ** 2))
    ss_tot = float(np.sum((latents - latents.mean(axis=0)) ** 2))
    if ss_tot == 0.0:
        warnings.warn("r_squared: zero-variance latents, R^2 undefined")
        return None
    return 1.0 - ss_res / ss_tot


def histogram(values: np.ndarray, bins: int = HISTOGRAM_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Fixed uniform bins over [-1, 1]; values outside are clipped into the
    edge bins so counts always sum to the sample count."""
    edges = np.linspace(-1.0, 1.0, bins + 1)
    clipped = np.clip(np.asarray(values, dtype=np.float64).reshape(-1), -1.0, 1.0)
    counts, _ = np.histogram(clipped, bins=edges)
    return counts, edges


def collect_traces(agent: Agent, env: Env, steps: int, rng: Rng) -> dict[str, np.ndarray]:
    """Roll the stochastic policy and record, per step, the encoder latent,
    the prediction made one step earlier and the resulting error."""
    obs = env.reset(int(rng.stream("diag-env").integers(0, 2**63)))
    state = agent.initial_state(1)
    action_rng = [rng.stream("diag-action")]
    latents, predictions, errors = [], [], []
    for _ in range(steps):
        out = agent.act(obs[None], state, action_rng)
        latents.append(out["latent"][0])
        predictions.append(out["prev_prediction"][0])
        errors.append(out["error"][0])
        step = env.step(int(out["actions"][0]))
        if step.terminal:
            obs = env.reset()
            state = agent.initial_state(1)
        else:
            obs = step.observation
            with ad.no_grad():
                state = out["state"]
    return {"latent": np.stack(latents), "prediction": np.stack(predictions),
            "error": np.stack(errors)}


def diagnostics_report(traces: dict[str, np.ndarray]) -> dict:
    report: dict = {"samples": int(traces["latent"].shape[0]),
                    "full_scale_reference_r2": FULL_SCALE_REFERENCE_R2}
    r2 = r_squared(traces["prediction"], traces["latent"])
    report["r_squared"] = r2
    report["histograms"] = {}
    for key in ("latent", "prediction", "error"):
        counts, edges = histogram(traces[key])
        report["histograms"][key] = {"counts": counts.tolist(),
                                     "edges": edges.tolist()}
    return report
