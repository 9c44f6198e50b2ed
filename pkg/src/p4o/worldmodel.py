"""Dual-population recurrent world model and the matched single-LSTM variant.

The predictive-coding LSTM keeps two cell populations. The prediction
population's hidden output p is a forecast of the next encoder latent; the
feedback loop converts the actual latent x into an error signal

    e_t = p_{t-1} - x_t

which is the only external input either population sees. Gate pre-activations
for both populations combine the error input with the *belief* population's
previous hidden state:

    belief:      z_j = W_j^h e_t + U_j^h h_{t-1} + b_j^h
    prediction:  z_j = W_j^p e_t + U_j^p h_{t-1} + b_j^p

for j in {input, forget, output, candidate}; the candidate gate follows the
same template with a tanh nonlinearity, and cells update as in a standard
LSTM. The prediction population thus reads its own previous state only
indirectly, through the error loop.

Per gate this needs kp + kq + k parameters (k = p + q), against k^2 + kp + k
for a plain LSTM with k hidden units reading the latent directly; both counts
are asserted at construction.

Weights are stored with the four gates fused row-wise in order
(input, forget, output, candidate).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .errors import ConfigError
from .initializers import fan_in_uniform, orthogonal, zeros
from .rng import Rng


@dataclass
class RecurrentState:
    """Belief hidden/cell pair and prediction hidden/cell pair, batch-major.

    For the single-population baseline the prediction components have width
    zero. Components of terminated episodes are zeroed before the next step.
    """
    h: DiffArray     # (B, q)
    c_h: DiffArray   # (B, q)
    p: DiffArray     # (B, p_dim)
    c_p: DiffArray   # (B, p_dim)

    @staticmethod
    def zeros(batch: int, belief_dim: int, pred_dim: int, dtype=np.float64) -> "RecurrentState":
        z = lambda n: DiffArray(np.zeros((batch, n), dtype=dtype))
        return RecurrentState(z(belief_dim), z(belief_dim), z(pred_dim), z(pred_dim))

    @property
    def batch(self) -> int:
        return self.h.shape[0]

    def masked(self, keep: np.ndarray) -> "RecurrentState":
        """Multiply every component by a (B, 1) keep mask (1 = carry on,
        0 = episode ended); differentiable."""
        m = DiffArray(np.asarray(keep, dtype=self.h.dtype).reshape(-1, 1))
        return RecurrentState(ad.mul(self.h, m), ad.mul(self.c_h, m),
                              ad.mul(self.p, m), ad.mul(self.c_p, m))

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"h": self.h.data.copy(), "c_h": self.c_h.data.copy(),
                "p": self.p.data.copy(), "c_p": self.c_p.data.copy()}

    @staticmethod
    def from_arrays(d: dict[str, np.ndarray], dtype=None) -> "RecurrentState":
        return RecurrentState(*(DiffArray(d[k], dtype=dtype) for k in ("h", "c_h", "p", "c_p")))

    def rows(self, index: np.ndarray) -> "RecurrentState":
        """Plain (non-differentiable) row selection, for regrouping batches."""
        return RecurrentState(*(DiffArray(t.data[index]) for t in (self.h, self.c_h, self.p, self.c_p)))


@dataclass
class StepOutput:
    error: DiffArray      # (B, p_dim): prediction error fed to the gates
    state: RecurrentState
    combined: DiffArray   # (B, k): what the actor-critic heads read


def _cell_update(z: DiffArray, c_prev: DiffArray, n: int) -> tuple[DiffArray, DiffArray]:
    gi = ad.sigmoid(ad.narrow(z, 1, 0, n))
    gf = ad.sigmoid(ad.narrow(z, 1, n, n))
    go = ad.sigmoid(ad.narrow(z, 1, 2 * n, n))
    gc = ad.tanh(ad.narrow(z, 1, 3 * n, n))
    c = ad.add(ad.mul(gf, c_prev), ad.mul(gi, gc))
    h = ad.mul(go, ad.tanh(c))
    return h, c


def _gate_init(rng: Rng, rows_per_gate: int, in_dim: int, rec_dim: int, dtype):
    w_in = fan_in_uniform(rng.stream("w_in"), (4 * rows_per_gate, in_dim), dtype)
    w_rec = np.concatenate(
        [orthogonal(rng.stream("w_rec", g), rows_per_gate, rec_dim, dtype) for g in range(4)],
        axis=0)
    b = zeros((4 * rows_per_gate,), dtype)
    b[rows_per_gate:2 * rows_per_gate] = 1.0  # forget gate starts open
    return w_in, w_rec, b


class PcLstm:
    """Predictive-coding LSTM: belief population of size q, prediction
    population matching the encoder latent size p."""

    def __init__(self, latent_dim: int, belief_dim: int, rng: Rng, dtype=np.float64):
        if latent_dim <= 0 or belief_dim <= 0:
            raise ConfigError(f"population sizes must be positive: p={latent_dim}, q={belief_dim}")
        self.p_dim = latent_dim
        self.q_dim = belief_dim
        self.k = latent_dim + belief_dim
        self.dtype = dtype
        init = rng.stream("pc_lstm")
        bw_in, bw_rec, bb = _gate_init(init.stream("belief"), belief_dim, latent_dim, belief_dim, dtype)
        pw_in, pw_rec, pb = _gate_init(init.stream("pred"), latent_dim, latent_dim, belief_dim, dtype)
        self.params = {
            "belief.w_in": ad.parameter(bw_in, "belief.w_in", dtype),
            "belief.w_rec": ad.parameter(bw_rec, "belief.w_rec", dtype),
            "belief.b": ad.parameter(bb, "belief.b", dtype),
            "pred.w_in": ad.parameter(pw_in, "pred.w_in", dtype),
            "pred.w_rec": ad.parameter(pw_rec, "pred.w_rec", dtype),
            "pred.b": ad.parameter(pb, "pred.b", dtype),
        }
        count = self.parameter_count()
        k, p, q = self.k, self.p_dim, self.q_dim
        assert count == 4 * (k * p + k * q + k), (count, 4 * (k * p + k * q + k))
        # Strictly fewer parameters than a plain LSTM with the same k.
        assert count < 4 * (k * k + k * p + k)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def initial_state(self, batch: int) -> RecurrentState:
        return RecurrentState.zeros(batch, self.q_dim, self.p_dim, self.dtype)

    def step(self, x: DiffArray, prev: RecurrentState) -> StepOutput:
        """One closed-loop step consuming the current latent x."""
        if x.shape[1] != self.p_dim:
            raise ad.DimensionError(f"pc_lstm step: latent {x.shape} vs p_dim {self.p_dim}")
        e = ad.sub(prev.p, x)
        zb = ad.affine2(e, self.params["belief.w_in"], prev.h, self.params["belief.w_rec"],
                        self.params["belief.b"])
        h, c_h = _cell_update(zb, prev.c_h, self.q_dim)
        zp = ad.affine2(e, self.params["pred.w_in"], prev.h, self.params["pred.w_rec"],
                        self.params["pred.b"])
        p, c_p = _cell_update(zp, prev.c_p, self.p_dim)
        state = RecurrentState(h, c_h, p, c_p)
        return StepOutput(error=e, state=state, combined=ad.concat([h, p], axis=1))

    def open_loop_step(self, prev: RecurrentState) -> RecurrentState:
        """One step with the error input fixed to the zero vector; both
        populations evolve on recurrent input alone."""
        zb = ad.linear(prev.h, self.params["belief.w_rec"], self.params["belief.b"])
        h, c_h = _cell_update(zb, prev.c_h, self.q_dim)
        zp = ad.linear(prev.h, self.params["pred.w_rec"], self.params["pred.b"])
        p, c_p = _cell_update(zp, prev.c_p, self.p_dim)
        return RecurrentState(h, c_h, p, c_p)

    def open_loop_rollout(self, start: RecurrentState, horizon: int) -> tuple[list[DiffArray], RecurrentState]:
        """`horizon` zero-error steps from `start`; returns the prediction
        population's hidden output at each step. Gradients flow through the
        whole chain."""
        if horizon < 1:
            raise ConfigError(f"open-loop rollout needs horizon >= 1, got {horizon}")
        preds = []
        state = start
        for _ in range(horizon):
            state = self.open_loop_step(state)
            preds.append(state.p)
        return preds, state


class BaselineLstm:
    """Plain single-population LSTM reading the latent directly; the
    combined output is its k-dimensional hidden state and the reported
    prediction error is identically zero."""

    def __init__(self, latent_dim: int, hidden_k: int, rng: Rng, dtype=np.float64):
        if latent_dim <= 0 or hidden_k <= 0:
            raise ConfigError(f"sizes must be positive: p={latent_dim}, k={hidden_k}")
        self.p_dim = latent_dim
        self.k = hidden_k
        self.dtype = dtype
        init = rng.stream("baseline_lstm")
        w_in, w_rec, b = _gate_init(init.stream("cell"), hidden_k, latent_dim, hidden_k, dtype)
        self.params = {
            "cell.w_in": ad.parameter(w_in, "cell.w_in", dtype),
            "cell.w_rec": ad.parameter(w_rec, "cell.w_rec", dtype),
            "cell.b": ad.parameter(b, "cell.b", dtype),
        }
        count = self.parameter_count()
        k, p = self.k, self.p_dim
        assert count == 4 * (k * k + k * p + k), (count, 4 * (k * k + k * p + k))

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def initial_state(self, batch: int) -> RecurrentState:
        return RecurrentState.zeros(batch, self.k, 0, self.dtype)

    def step(self, x: DiffArray, prev: RecurrentState) -> StepOutput:
        if x.shape[1] != self.p_dim:
            raise ad.DimensionError(f"baseline step: latent {x.shape} vs p_dim {self.p_dim}")
        z = ad.affine2(x, self.params["cell.w_in"], prev.h, self.params["cell.w_rec"],
                       self.params["cell.b"])
        h, c_h = _cell_update(z, prev.c_h, self.k)
        state = RecurrentState(h, c_h, prev.p, prev.c_p)
        e = DiffArray(np.zeros((x.shape[0], self.p_dim), dtype=self.dtype))
        return StepOutput(error=e, state=state, combined=h)


def horizon_predictions(model: PcLstm, state: RecurrentState, horizon: int) -> list[DiffArray]:
    """Forecasts of the next `horizon` latents from the state after a
    closed-loop step.

    The state's own prediction output already forecasts the next latent, so
    it is the first entry; deeper forecasts come from unrolling the model
    with the error input fixed to zero. At horizon 1 this is exactly the
    one-step prediction error path with no unrolling at all.
    """
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    preds = [state.p]
    if horizon > 1:
        more, _ = model.open_loop_rollout(state, horizon - 1)
        preds.extend(more)
    return preds


def prediction_loss(predictions: list[DiffArray], true_latents: list[DiffArray]) -> DiffArray:
    """Sum over the horizon of mean squared prediction errors; the mean runs
    over batch and feature dimensions at each horizon level."""
    if len(predictions) != len(true_latents):
        raise ad.DimensionError(
            f"prediction_loss: {len(predictions)} predictions vs {len(true_latents)} targets")
    total = None
    for pred, target in zip(predictions, true_latents):
        term = ad.mean(ad.square(ad.sub(pred, target)))
        total = term if total is None else ad.add(total, term)
    return total
