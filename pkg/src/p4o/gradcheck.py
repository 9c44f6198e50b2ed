"""Finite-difference certification of backward passes.

`grad_check` is the oracle every other module's gradients are measured
against: it compares the analytic gradient of a scalar loss with central
differences (f(x+eps) - f(x-eps)) / (2 eps), coordinate by coordinate, and
reports the worst relative error and the parameter it occurred in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import DiffArray, NumericError, zero_grads
from .rng import Rng


@dataclass
class GradCheckReport:
    max_rel_err: float
    failing_param: str
    coords_checked: int
    per_param: dict[str, float] = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(loss_fn: Callable[[], DiffArray],
               params: Mapping[str, DiffArray],
               eps: float = 1e-5,
               max_coords: int = 10_000,
               subsample_seed: int = 0,
               denom_floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of `loss_fn` against central differences.

    `loss_fn` must rebuild its graph on every call, be scalar valued and be
    deterministic given fixed inputs. Above `max_coords` total coordinates a
    deterministic subsample of coordinates is checked instead of all of them.
    Relative error per coordinate is |a - n| / max(|a| + |n|, denom_floor);
    the floor plays the role of an absolute tolerance for coordinates whose
    gradient is too small for finite differences to resolve.
    """
    params = dict(params)
    zero_grads(params.values())
    loss = loss_fn()
    if loss.size != 1:
        raise ValueError(f"grad_check: loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: loss is non-finite at the unperturbed point")
    loss.backward()
    analytic = {}
    for name, p in params.items():
        analytic[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    total = sum(p.data.size for p in params.values())
    coords: list[tuple[str, int]] = []
    if total <= max_coords:
        for name, p in params.items():
            coords.extend((name, i) for i in range(p.data.size))
    else:
        rng = Rng(subsample_seed, "gradcheck")
        per_param = max(8, max_coords // max(len(params), 1))
        for name, p in params.items():
            n = p.data.size
            if n <= per_param:
                coords.extend((name, i) for i in range(n))
            else:
                picks = rng.stream(name).gen.choice(n, size=per_param, replace=False)
                coords.extend((name, int(i)) for i in np.sort(picks))

    worst = 0.0
    worst_name = ""
    per_param_worst: dict[str, float] = {name: 0.0 for name in params}
    for name, i in coords:
        flat = params[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(loss_fn().data)
        flat[i] = orig - eps
        f_minus = float(loss_fn().data)
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(
                f"grad_check: non-finite loss perturbing {name}[{i}] by +/-{eps}")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[name].reshape(-1)[i])
        rel = abs(a - numeric) / max(abs(a) + abs(numeric), denom_floor)
        per_param_worst[name] = max(per_param_worst[name], rel)
        if rel > worst:
            worst, worst_name = rel, f"{name}[{i}]"
    return GradCheckReport(max_rel_err=worst, failing_param=worst_name,
                           coords_checked=len(coords), per_param=per_param_worst)
