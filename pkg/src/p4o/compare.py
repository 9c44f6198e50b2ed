"""Multi-seed comparison between two configurations.

Trains both configurations on every seed, aligns learning curves by
environment frames, and reports the mean final rolling score of each side
together with a one-tailed Welch (unequal variance) two-sample t-test for
"A scores higher than B".
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
from scipy import stats as scistats

from .config import RunConfig
from .errors import ConfigError
from .metrics import read_metrics
from .plots import save_compare
from .run import TrainingRun


def welch_one_tailed(a: list[float], b: list[float]) -> dict:
    """t statistic, Welch degrees of freedom and one-tailed p for
    mean(a) > mean(b). Zero pooled variance degenerates to t = 0 (equal
    means) or +/- infinity."""
    a_arr = np.asarray(a, dtype=np.float64)
    b_arr = np.asarray(b, dtype=np.float64)
    va = a_arr.var(ddof=1) / len(a_arr)
    vb = b_arr.var(ddof=1) / len(b_arr)
    diff = float(a_arr.mean() - b_arr.mean())
    if va + vb == 0.0:
        t = 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
        return {"t": t, "dof": float(len(a_arr) + len(b_arr) - 2),
                "p_value": 0.5 if diff == 0.0 else (0.0 if diff > 0 else 1.0)}
    dof = (va + vb) ** 2 / (va ** 2 / (len(a_arr) - 1) + vb ** 2 / (len(b_arr) - 1))
    t = diff / math.sqrt(va + vb)
    return {"t": float(t), "dof": float(dof), "p_value": float(scistats.t.sf(t, dof))}


def _run_side(cfg: RunConfig, seeds: list[int], out: Path, tag: str, log) -> list[list[dict]]:
    rows_per_seed = []
    for seed in seeds:
        sub = out / f"{tag}_seed{seed}"
        side_cfg = RunConfig(**dict(dataclasses.asdict(cfg), seed=seed, out=str(sub)))
        if log:
            log(f"[compare] training {tag} ({side_cfg.variant}) seed {seed}")
        run = TrainingRun(side_cfg)
        run.run(log=None)
        rows_per_seed.append(read_metrics(sub / "metrics.jsonl"))
    return rows_per_seed


def run_compare(cfg_a: RunConfig, cfg_b: RunConfig, seeds: list[int],
                out_dir: str | Path, log=print) -> dict:
    if len(seeds) < 2:
        raise ConfigError("compare needs at least 2 seeds")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows_a = _run_side(cfg_a, seeds, out, "a", log)
    rows_b = _run_side(cfg_b, seeds, out, "b", log)

    def curve(rows):
        return [(r["frames"], r["rolling_mean"], r["rolling_stderr"]) for r in rows]

    def finals(rows_per_seed):
        vals = []
        for rows in rows_per_seed:
            final = rows[-1]["rolling_mean"]
            if final is None:
                raise ConfigError("a run finished without any completed episode; "
                                  "final rolling mean undefined")
            vals.append(float(final))
        return vals

    frames_a = [r["frames"] for r in rows_a[0]]
    frames_b = [r["frames"] for r in rows_b[0]]
    if frames_a != frames_b:
        raise ConfigError("compare sides disagree on the frame grid; use the "
                          "same batch geometry and batch count")

    finals_a, finals_b = finals(rows_a), finals(rows_b)
    test = welch_one_tailed(finals_a, finals_b)
    report = {
        "label_a": cfg_a.variant, "label_b": cfg_b.variant,
        "env": cfg_a.env, "seeds": seeds,
        "finals_a": finals_a, "finals_b": finals_b,
        "mean_a": float(np.mean(finals_a)), "mean_b": float(np.mean(finals_b)),
        "stderr_a": float(np.std(finals_a, ddof=1) / np.sqrt(len(finals_a))),
        "stderr_b": float(np.std(finals_b, ddof=1) / np.sqrt(len(finals_b))),
        "mean_difference": float(np.mean(finals_a) - np.mean(finals_b)),
        **test,
    }
    (out / "compare.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with open(out / "compare.csv", "w", encoding="utf-8") as f:
        f.write("side,seed,frames,rolling_mean,stderr\n")
        for tag, rows_per_seed in (("a", rows_a), ("b", rows_b)):
            for seed, rows in zip(seeds, rows_per_seed):
                for fr, m, e in curve(rows):
                    f.write(f"{tag},{seed},{fr},{'' if m is None else m},"
                            f"{'' if e is None else e}\n")
    save_compare([curve(r) for r in rows_a], [curve(r) for r in rows_b],
                 report["label_a"], report["label_b"], out / "compare.png")
    if log:
        log(f"[compare] mean {report['label_a']} = {report['mean_a']:.3f} +/- "
            f"{report['stderr_a']:.3f}, {report['label_b']} = {report['mean_b']:.3f} "
            f"+/- {report['stderr_b']:.3f}, t = {report['t']:.3f}, "
            f"one-tailed p = {report['p_value']:.4f}")
    return report
