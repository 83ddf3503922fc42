"""Command-line entry points: experiment runs, evaluation, studies, serving."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import RunConfig, desk_preset, load_config, log_level, paper_defaults
from .envs import CORRIDOR, FOURROOMS


def _setup_logging() -> None:
    logging.basicConfig(level=getattr(logging, log_level().upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _base_cfg(args, env_kind: str) -> RunConfig:
    if getattr(args, "config", None):
        return load_config(args.config, base=desk_preset(env_kind))
    if getattr(args, "paper_scale", False):
        return paper_defaults(env_kind)
    return desk_preset(env_kind)


def cmd_run(args) -> int:
    from .experiments import METHODS, run_matrix, summarize, write_summary
    methods = list(METHODS) if args.algo == "all" else [args.algo]
    env_kind = args.env
    cfg = _base_cfg(args, env_kind)
    results = run_matrix(methods, env_kind, args.seeds, args.budget, args.out,
                         base_cfg=cfg)
    rows = summarize(results)
    path = write_summary(rows, args.out)
    for row in rows:
        print(f"{row['method']:>10}: best success "
              f"{row['best_success_mean']:.2f} +- {row['best_success_std']:.2f}  "
              f"expert usage {row['expert_data_usage']:.0f} "
              f"({row['intervention_rate']:.2f})")
    print(f"summary written to {path}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate
    from .policy import policy_from_json
    with open(args.checkpoint) as fh:
        policy = policy_from_json(json.load(fh))
    cfg = _base_cfg(args, args.env).replace(env_kind=args.env)
    report = evaluate(policy, cfg, n_rollouts=args.rollouts)
    print(json.dumps(report.to_dict(), indent=1))
    return 0


def cmd_offline_bc(args) -> int:
    from .buffers import EXPERT, load_buffer
    from .metrics import make_eval_env, offline_quality_curve
    from .runlog import read_runlog

    records = read_runlog(args.runlog)
    header = records[0]
    cfg = RunConfig.from_dict(header["config"])
    import os
    buf_path = os.path.join(os.path.dirname(args.runlog), "human_buffer.jsonl")
    env = make_eval_env(cfg)
    human = load_buffer(buf_path, EXPERT, env.space)
    warmup_len = 0
    with open(os.path.join(os.path.dirname(args.runlog), "result.json")) as fh:
        warmup_len = json.load(fh)["warmup_expert_steps"]
    grid = [int(v) for v in args.grid.split(",")]
    curve = offline_quality_curve(human, warmup_len, grid, cfg)
    skipped = [t for t in grid if t not in [c[0] for c in curve]]
    for t in skipped:
        logging.getLogger("aimgate").warning(
            "grid point %d yields an empty dataset after stripping warm-up", t)
    for t, report in curve:
        print(f"T={t:5d}: success {report.success_rate:.2f} "
              f"return {report.episodic_return:.2f}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    from .service import create_app
    cfg = _base_cfg(args, args.env).replace(env_kind=args.env)
    app = create_app(cfg, pacing_hz=args.pacing)
    uvicorn.run(app, host=args.host, port=args.port, log_level=log_level())
    return 0


def main(argv=None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(
        prog="aimgate",
        description="Robot-gated interactive imitation learning testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train methods and summarize")
    p_run.add_argument("--algo", required=True,
                       choices=["aim", "bc", "hgdagger", "ensemble", "thrifty",
                                "aim-reward", "aim-notd", "all"])
    p_run.add_argument("--env", required=True, choices=[FOURROOMS, CORRIDOR])
    p_run.add_argument("--seeds", type=int, default=5)
    p_run.add_argument("--budget", type=int, default=2000)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--config", help="key = value overrides file")
    p_run.add_argument("--paper-scale", action="store_true",
                       help="use published hyperparameters instead of the desk preset")
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="evaluate a policy checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--env", required=True, choices=[FOURROOMS, CORRIDOR])
    p_eval.add_argument("--rollouts", type=int, default=50)
    p_eval.add_argument("--config")
    p_eval.set_defaults(func=cmd_eval)

    p_bc = sub.add_parser("offline-bc", help="data-quality curve from a run log")
    p_bc.add_argument("--runlog", required=True)
    p_bc.add_argument("--grid", required=True,
                      help="comma-separated prefix lengths, e.g. 100,200,400")
    p_bc.set_defaults(func=cmd_offline_bc)

    p_serve = sub.add_parser("serve", help="live human-expert teaching session")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--env", required=True, choices=[FOURROOMS, CORRIDOR])
    p_serve.add_argument("--config")
    p_serve.add_argument("--pacing", type=float, default=10.0,
                         help="frames per second while streaming")
    p_serve.set_defaults(func=cmd_serve)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
