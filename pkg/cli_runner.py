"""
cli_runner.py
Operator entry point: `python cli_runner.py <subcommand> [flags]`.

  gen-data  demonstration traces for N personas
  train     joint training → checkpoint + CSV log
  fit-user  embedding-only fit of a held-out trace
  rollout   drive one study condition with the learned policy
  shift     move an embedding ±Δ ADB along the aggression gradient
  perp      sample the orthogonal ellipse at a given angle
  eval      metrics / mimic-accuracy CSV over rollout traces
  report    correlation and ordering summary JSON
  pipeline  all of the above through the LangGraph workflow

Exit codes: 0 ok, 2 usage, 3 validation / IO, 4 training diverged.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

from dotenv import load_dotenv

from config import MPH_TO_MPS, load_config
from errors import MavericError
from tools.checkpoint import file_checksum
from tools.log import configure, get_logger

log = get_logger(__name__)

CONDITION_CHOICES = ("mimic", "aggressive", "cautious", "perp")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (sections sim, controllers, personas, learn, stylespace)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                   help="dotted config override, repeatable")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maveric", description="Driving-style embeddings on a two-lane highway")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate persona demonstration traces")
    _common(p)
    p.add_argument("--personas", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--adb", type=float, nargs="+", help="explicit ADB scores instead of the even grid")
    p.add_argument("--id-prefix", default="p")
    p.add_argument("--duration-s", type=float)
    p.add_argument("--posted-speed-mph", type=float)

    p = sub.add_parser("train", help="train the style network")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="training-log CSV (default: <out>.log.csv)")

    p = sub.add_parser("fit-user", help="fit an embedding for a new driver against a frozen network")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("rollout", help="drive one study condition")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--embedding", required=True)
    p.add_argument("--condition", choices=CONDITION_CHOICES, default="mimic")
    p.add_argument("--angle-deg", type=float, default=0.0)
    p.add_argument("--delta-adb", type=float)
    p.add_argument("--duration-s", type=float)
    p.add_argument("--posted-speed-mph", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("shift", help="shift an embedding along the aggression gradient")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--embedding", required=True)
    p.add_argument("--delta-adb", type=float, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("perp", help="sample the ellipse orthogonal to the aggression gradient")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--embedding", required=True)
    p.add_argument("--angle-deg", type=float, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="metrics and mimic accuracy per rollout")
    _common(p)
    p.add_argument("--data", required=True, help="directory of the users' demonstration traces")
    p.add_argument("--rollouts", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="correlation / ordering summary")
    _common(p)
    p.add_argument("--eval", dest="eval_csv", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pipeline", help="gen-data → train → fit-user → rollout ×4 → eval → report")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--personas", type=int, default=6)
    p.add_argument("--test-personas", type=int, default=3)
    p.add_argument("--duration-s", type=float)
    p.add_argument("--rollout-duration-s", type=float)
    p.add_argument("--angles", type=int)
    return parser


def _posted(args) -> Optional[float]:
    mph = getattr(args, "posted_speed_mph", None)
    return None if mph is None else mph * MPH_TO_MPS


def dispatch(args: argparse.Namespace) -> None:
    # imported here so `--help` stays fast
    import pipeline
    from graph import run_pipeline

    cfg = load_config(args.config, args.overrides, args.seed)
    seed = cfg.seed
    cmd = args.command

    if cmd == "gen-data":
        pipeline.gen_data(cfg, args.out, args.personas, seed, args.duration_s, _posted(args),
                          args.id_prefix, args.adb)
    elif cmd == "train":
        path = pipeline.train_model(cfg, args.data, args.out, seed, args.log)
        print(f"✅ {path}  checksum {file_checksum(path)}")
    elif cmd == "fit-user":
        pipeline.fit_user(cfg, args.ckpt, args.trace, args.out, seed)
    elif cmd == "rollout":
        pipeline.run_rollout(cfg, args.ckpt, args.embedding, args.condition, args.out, seed,
                             math.radians(args.angle_deg), args.delta_adb, args.duration_s, _posted(args))
    elif cmd == "shift":
        pipeline.shift_embedding(cfg, args.ckpt, args.embedding, args.delta_adb, args.out)
    elif cmd == "perp":
        pipeline.perp_embedding(cfg, args.ckpt, args.embedding, math.radians(args.angle_deg), args.out)
    elif cmd == "eval":
        pipeline.evaluate(cfg, args.data, args.rollouts, args.out)
    elif cmd == "report":
        pipeline.build_report(cfg, args.eval_csv, args.ckpt, args.embeddings, args.out)
    elif cmd == "pipeline":
        state = run_pipeline(cfg, Path(args.out), seed, args.personas, args.test_personas,
                             args.duration_s, args.rollout_duration_s, args.angles)
        if state.get("error"):
            exc = state.get("exception")
            if isinstance(exc, (MavericError, OSError)):
                raise exc
            raise MavericError(state["error"])


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    configure()
    args = build_parser().parse_args(argv)     # usage errors exit 2 here
    try:
        dispatch(args)
    except MavericError as exc:
        log.error("❌ %s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("❌ %s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
