#!/usr/bin/env python3
"""
LaneTopoLab - Redundancy-assignment experiments for lane topology decoders
Main command-line launcher

Usage:
    python main.py scenegen --config data/smoke.cfg --count 20 --seed 0 --out scenes/
    python main.py train --config data/desk_scale.cfg --out runs/reordered/
    python main.py eval --checkpoint runs/reordered/checkpoint.ltck --scenes scenes/ --out report.json
    python main.py ablate --config data/desk_scale.cfg --axis mode --seeds 0,1,2,3,4 --out runs/
    python main.py gradcheck
    python main.py ols --det-l 0.318 --det-t 0.494 --top-ll 0.322 --top-lt 0.339

Exit codes: 0 success, 2 usage or configuration error, 3 numeric error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config import RunConfig, load_run_config
from errors import LaneTopoError, NumericError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

logger = logging.getLogger(__name__)


def setup_logging(verbose: bool = False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _load_config(path: Optional[str]) -> RunConfig:
    return load_run_config(path) if path else RunConfig()


def _parse_seeds(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def cmd_scenegen(args) -> int:
    from scene import save_scene, scene_pool

    cfg = _load_config(args.config)
    out = Path(args.out)
    scenes = scene_pool(cfg.scene, args.count, seed=args.seed)
    for i, scene in enumerate(scenes):
        save_scene(scene, out / f"scene_{args.seed + i:06d}.json")
    print(f"✅ Wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from harness import train

    cfg = _load_config(args.config)
    record = train(cfg, args.out or cfg.output_dir, seed=args.seed)
    print(f"✅ Training finished: {len(record.losses)} steps, checkpoint {record.checkpoint_hash}")
    if record.report:
        print(f"   OLS {record.report['ols']:.4f}  TOP_ll {record.report['top_ll']:.4f}  "
              f"TOP_lt {record.report['top_lt']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from harness import evaluate
    from scene import load_scene_dir

    report = evaluate(args.checkpoint, load_scene_dir(args.scenes))
    report.save_json(args.out)
    report.save_csv(Path(args.out).with_suffix(".csv"))
    print(f"📊 DET_l {report.det_l:.4f}  DET_t {report.det_t:.4f}  TOP_ll {report.top_ll:.4f}  "
          f"TOP_lt {report.top_lt:.4f}  OLS {report.ols:.4f}")
    print(f"💾 Report saved to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from harness import ablate

    cfg = _load_config(args.config)
    result = ablate(cfg, args.axis, seeds=args.seeds, out_dir=args.out, workers=args.workers,
                    plot=not args.no_plot)
    print(result.medians.to_string(index=False))
    for check in result.trends:
        print(f"{'✅' if check.holds else '⚠️'} {check.name}: {check.detail}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from gradcheck import run_suite

    results = run_suite(trials=args.trials, seed=args.seed)
    failed = [r for r in results if not r.passed]
    worst = max(results, key=lambda r: r.rel_error)
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed "
          f"(worst: {worst.name} {worst.rel_error:.2e})")
    for result in failed:
        print(f"❌ {result.name} trial {result.trial}: {result.rel_error:.2e}")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_ols(args) -> int:
    from metrics import ols

    print(f"{ols(args.det_l, args.det_t, args.top_ll, args.top_lt):.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="LaneTopoLab - lane topology redundancy-assignment experiments")
    parser.add_argument("--verbose", action="store_true", help="Enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenegen", help="Write synthetic scene JSON files")
    p.add_argument("--config", help="Run configuration file (scene.* keys are used)")
    p.add_argument("--count", type=int, default=10, help="Number of scenes")
    p.add_argument("--seed", type=int, default=0, help="First scene seed")
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(func=cmd_scenegen)

    p = sub.add_parser("train", help="Train one run")
    p.add_argument("--config", help="Run configuration file")
    p.add_argument("--out", help="Output directory (default: output_dir from the config)")
    p.add_argument("--seed", type=int, help="Override the run seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint on a scene directory")
    p.add_argument("--checkpoint", required=True, help="Checkpoint file")
    p.add_argument("--scenes", required=True, help="Directory of scene JSON files")
    p.add_argument("--out", required=True, help="Report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="Run an ablation axis over several seeds")
    p.add_argument("--config", help="Base run configuration file")
    p.add_argument("--axis", required=True, choices=["mode", "k", "m", "component"])
    p.add_argument("--seeds", type=_parse_seeds, help="Comma-separated seeds (default: seeds from the config)")
    p.add_argument("--out", help="Output directory")
    p.add_argument("--workers", type=int, default=1, help="Parallel worker processes")
    p.add_argument("--no-plot", action="store_true", help="Skip the SVG plot")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="Run the finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=100, help="Trials per case")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ols", help="Overall score from the four submetrics in [0, 1]")
    p.add_argument("--det-l", type=float, required=True)
    p.add_argument("--det-t", type=float, required=True)
    p.add_argument("--top-ll", type=float, required=True)
    p.add_argument("--top-lt", type=float, required=True)
    p.set_defaults(func=cmd_ols)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except NumericError as e:
        logger.error(f"Numeric failure: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LaneTopoError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
