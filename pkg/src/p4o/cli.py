"""Command-line interface.

    p4o train    --config c.json --env tmaze --variant p4o --batches 200 --out DIR
    p4o eval     --checkpoint DIR/checkpoints/ckpt_latest.ckpt --mode deterministic
    p4o diagnose --checkpoint ... --env pixelcatch --steps 2000 --out DIR
    p4o compare  --config-a a.json --config-b b.json --seeds 0,1,2 --out DIR

Configuration precedence: flags > P4O_* environment variables > config file >
preset > defaults. Exit codes: 0 success, 2 configuration error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .autodiff import NumericError
from .config import load_config
from .errors import ConfigError, EnvProtocolError


def _add_common_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="flat JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", type=str, default=None,
                   help="p4o | p4o-no-pp | lstm-ppo-1024 | lstm-ppo-800")
    p.add_argument("--env", type=str, default=None,
                   help="pixelcatch | tmaze | external:<command>")
    p.add_argument("--batches", type=int, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--precision", type=int, choices=(32, 64), default=None)
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="omit wall-clock timings so identical runs write "
                        "byte-identical metrics files")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def _flag_overrides(args: argparse.Namespace) -> dict:
    overrides = {key: getattr(args, key) for key in
                 ("seed", "variant", "env", "batches", "out", "precision",
                  "deterministic") if getattr(args, key, None) is not None}
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="p4o",
        description="Recurrent PPO with a predictive-processing world model")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run collect/update batches")
    _add_common_config_flags(p_train)
    p_train.add_argument("--resume", type=str, default=None,
                         help="checkpoint to continue from")

    p_eval = sub.add_parser("eval", help="play episodes from a checkpoint")
    p_eval.add_argument("--checkpoint", type=str, required=True)
    p_eval.add_argument("--mode", choices=("stochastic", "deterministic"),
                        default="stochastic")
    p_eval.add_argument("--episodes", type=int, default=10)
    p_eval.add_argument("--seed", type=int, default=0)

    p_diag = sub.add_parser("diagnose", help="activation histograms and "
                                             "prediction R^2 from a checkpoint")
    p_diag.add_argument("--checkpoint", type=str, required=True)
    p_diag.add_argument("--env", type=str, default=None,
                        help="override the checkpoint's environment")
    p_diag.add_argument("--steps", type=int, default=2000)
    p_diag.add_argument("--seed", type=int, default=0)
    p_diag.add_argument("--out", type=str, required=True)

    p_cmp = sub.add_parser("compare", help="train two configs over seeds and "
                                           "report a one-tailed Welch t-test")
    p_cmp.add_argument("--config-a", type=str, default=None)
    p_cmp.add_argument("--config-b", type=str, default=None)
    p_cmp.add_argument("--variant-a", type=str, default=None)
    p_cmp.add_argument("--variant-b", type=str, default=None)
    p_cmp.add_argument("--env", type=str, default=None)
    p_cmp.add_argument("--batches", type=int, default=None)
    p_cmp.add_argument("--seeds", type=str, default="0,1",
                       help="comma-separated list, at least two")
    p_cmp.add_argument("--out", type=str, required=True)
    p_cmp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key on both sides (repeatable)")
    return parser


def cmd_train(args: argparse.Namespace) -> int:
    from .run import TrainingRun
    if args.resume:
        run = TrainingRun.resume(args.resume, batches_override=args.batches)
    else:
        overrides = _flag_overrides(args)
        if "out" not in overrides and args.config is None:
            overrides["out"] = "runs/default"
        cfg = load_config(args.config, overrides)
        run = TrainingRun(cfg)
    run.run()
    print(f"done: {run.trainer.batch_index} batches, metrics in "
          f"{run.out / 'metrics.jsonl'}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .run import evaluate
    report = evaluate(args.checkpoint, args.mode, args.episodes, args.seed)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_diagnose(args: argparse.Namespace) -> int:
    from .diagnostics import collect_traces, diagnostics_report
    from .envs import make_env
    from .plots import save_histograms
    from .rng import Rng
    from .run import agent_from_checkpoint

    agent, cfg = agent_from_checkpoint(args.checkpoint)
    env_name = args.env or cfg.env
    env = make_env(env_name, sticky=cfg.sticky, frame_stack=cfg.frame_stack,
                   tmaze_corridor=cfg.tmaze_corridor, catch_drops=cfg.catch_drops)
    try:
        traces = collect_traces(agent, env, args.steps, Rng(args.seed, "diagnose"))
    finally:
        env.close()
    report = diagnostics_report(traces)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "diagnose.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with open(out / "diagnose_hist.csv", "w", encoding="utf-8") as f:
        f.write("series,bin_left,bin_right,count\n")
        for name, h in report["histograms"].items():
            edges = h["edges"]
            for i, count in enumerate(h["counts"]):
                f.write(f"{name},{edges[i]},{edges[i + 1]},{count}\n")
    save_histograms(report, out / "diagnose_hist.png")
    r2 = report["r_squared"]
    print(f"prediction R^2: {'undefined (zero-variance latents)' if r2 is None else f'{r2:.6f}'} "
          f"(large-scale reference {report['full_scale_reference_r2']})")
    print(f"reports written to {out}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    from .compare import run_compare

    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    shared = {k: v for k, v in (("env", args.env), ("batches", args.batches))
              if v is not None}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        shared[key.strip()] = value.strip()
    cfg_a = load_config(args.config_a, dict(shared, variant=args.variant_a)
                        if args.variant_a else dict(shared))
    cfg_b = load_config(args.config_b, dict(shared, variant=args.variant_b)
                        if args.variant_b else dict(shared))
    run_compare(cfg_a, cfg_b, seeds, args.out)
    print(f"compare report written to {Path(args.out) / 'compare.json'}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"train": cmd_train, "eval": cmd_eval,
                "diagnose": cmd_diagnose, "compare": cmd_compare}
    try:
        return handlers[args.command](args)
    except (ConfigError, EnvProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
