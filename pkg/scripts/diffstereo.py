#!/usr/bin/env python3
"""
diffstereo.py - Command-line entry point for the DiffStereo stereo restoration pipeline.

Every command prints a JSON result object on stdout. Exit codes: 0 success, 1 user error
(bad flags, missing files, malformed config, incompatible checkpoint), 2 internal error.

Usage:
    python scripts/diffstereo.py prepare-data --manifest data/train.jsonl --task sr4 --out data/prepared
    python scripts/diffstereo.py train --config configs/stage1.json --stage 1
    python scripts/diffstereo.py infer --ckpt runs/stage2_last.dsck --left l.png --right r.png --task sr4 --out out/
    python scripts/diffstereo.py eval --ckpt runs/stage2_last.dsck --manifest data/test.jsonl --report reports/eval.json
    python scripts/diffstereo.py dump-lhfr --ckpt runs/stage2_last.dsck --left l.png --right r.png --out lhfr/ --per-step
    python scripts/diffstereo.py selftest
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from lib.checkpoint import load_checkpoint
from lib.config import PROFILES, REPORTS_DIR, seed_override, train_config_from_dict
from lib.datapipe import (DegradationSpec, PatchSpec, StereoImagePair, Task, load_manifest, prepare_dataset,
                          sample_generator, scan_dataset_root)
from lib.errors import CheckpointError, ConfigError, DiffStereoError
from lib.io import load_json, read_png, save_json, write_lhfr, write_png
from lib.selftest import run_selftest
from lib.trainer import evaluate, load_model, train_stage1, train_stage2

logger = logging.getLogger("diffstereo")


class UsageError(DiffStereoError):
    """Bad command-line usage."""


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# =============================================================================
# Responses
# =============================================================================

def success_response(message: str, data: Optional[Dict] = None) -> Dict:
    """Build a success response object."""
    response = {"status": "success", "message": message}
    if data:
        response["data"] = data
    return response


def error_response(message: str, details: Optional[Dict] = None) -> Dict:
    """Build an error response object."""
    response = {"status": "error", "message": message}
    if details:
        response["details"] = details
    return response


# =============================================================================
# Commands
# =============================================================================

def _seed(args) -> int:
    return seed_override(0 if args.seed is None else args.seed)


def _read_lq_pair(left: str, right: str) -> StereoImagePair:
    stem = Path(left).stem
    pair_id = stem[:-2] if stem.endswith(("_L", "_l")) else stem
    pair = StereoImagePair(read_png(Path(left)), read_png(Path(right)), pair_id)
    return pair.validate_range()


def _load_model(ckpt_path: str, task: Optional[str] = None):
    ckpt = load_checkpoint(Path(ckpt_path))
    model = load_model(ckpt)
    if task is not None and model.sirn.cfg.scale != Task(task).scale:
        raise CheckpointError(
            f"Checkpoint restores at scale {model.sirn.cfg.scale} but task '{task}' needs {Task(task).scale}"
        )
    return ckpt, model


def cmd_prepare_data(args) -> Dict:
    if args.manifest:
        entries = load_manifest(Path(args.manifest))
    elif args.root:
        entries = scan_dataset_root(Path(args.root))
    else:
        raise UsageError("prepare-data needs --manifest or --root")
    spec = DegradationSpec(task=args.task, seed=_seed(args))
    summary = prepare_dataset(entries, spec, PatchSpec(args.patch_h, args.patch_w, args.stride), Path(args.out))
    return success_response(f"Prepared {summary['pairs']} pairs for task {args.task}", summary)


def cmd_train(args) -> Dict:
    data = load_json(Path(args.config))
    if not isinstance(data, dict):
        raise ConfigError(f"{args.config}: config must be a JSON object")
    data["stage"] = args.stage
    if args.profile:
        data["profile"] = args.profile
    if args.max_steps is not None:
        data["max_steps"] = args.max_steps
    cfg = train_config_from_dict(data, args.seed)
    resume = load_checkpoint(Path(args.resume)) if args.resume else None

    if cfg.stage == 1:
        ckpt = train_stage1(cfg, resume=resume)
    else:
        if not cfg.stage1_checkpoint:
            raise ConfigError("Stage 2 needs 'stage1_checkpoint' in the config")
        ckpt = train_stage2(cfg, load_checkpoint(Path(cfg.stage1_checkpoint)), resume=resume)

    return success_response(f"Stage {cfg.stage} finished", {
        "epoch": ckpt.epoch, "step": ckpt.step,
        "checkpoint": str(Path(cfg.checkpoint_dir) / f"stage{cfg.stage}_last.dsck"),
    })


def cmd_infer(args) -> Dict:
    ckpt, model = _load_model(args.ckpt, args.task)
    if ckpt.stage == 1:
        logger.warning("Stage 1 checkpoint: latents come from an untrained diffusion model")
    lq = _read_lq_pair(args.left, args.right)
    restored = model.infer(lq, generator=sample_generator(_seed(args), "infer", lq.id)).pair
    out_dir = Path(args.out)
    paths = {"left": str(out_dir / f"{lq.id}_restored_L.png"), "right": str(out_dir / f"{lq.id}_restored_R.png")}
    write_png(Path(paths["left"]), restored.left)
    write_png(Path(paths["right"]), restored.right)
    return success_response(f"Restored {lq.id} to {restored.height}x{restored.width}", paths)


def cmd_eval(args) -> Dict:
    ckpt = load_checkpoint(Path(args.ckpt))
    entries = load_manifest(Path(args.manifest))
    report = evaluate(ckpt, entries, task=args.task, seed=_seed(args))
    report_path = Path(args.report) if args.report else REPORTS_DIR / "eval.json"
    save_json(report_path, report)
    data = {"report": str(report_path), "mean": report["mean"], "errors": len(report["errors"])}
    if report["errors"]:
        return error_response(f"{len(report['errors'])} item(s) failed to evaluate", data)
    return success_response(f"Evaluated {len(report['items'])} pair(s)", data)


def cmd_dump_lhfr(args) -> Dict:
    _, model = _load_model(args.ckpt)
    if not model.sirn.cfg.use_lhfr:
        raise ConfigError("Checkpoint was trained without latent guidance; nothing to dump")
    lq = _read_lq_pair(args.left, args.right)
    out = model.infer(lq, generator=sample_generator(_seed(args), "infer", lq.id), keep_steps=args.per_step)

    T = model.diffusion.schedule.T
    files: List[Dict] = []
    for view, final, steps in (("L", out.z_left, out.steps_left), ("R", out.z_right, out.steps_right)):
        # steps run Z_T .. Z_0
        series = list(zip(range(T, -1, -1), steps)) if args.per_step else [(0, final)]
        for t, z in series:
            written = write_lhfr(Path(args.out) / f"{lq.id}_{view}_t{t}", z[0, 0])
            files.append({"view": view, "t": t, **written})
    return success_response(f"Wrote {len(files)} LHFR map(s)", {"files": files})


def cmd_selftest(args) -> Dict:
    result = run_selftest()
    data = {"passed": result.passed, "errors": result.errors, "error_count": len(result.errors)}
    if result.is_valid():
        return success_response(f"Selftest PASSED ({len(result.passed)} checks)", data)
    return error_response(f"Selftest FAILED ({len(result.errors)} error(s))", data)


OPERATIONS = {
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "dump-lhfr": cmd_dump_lhfr,
    "selftest": cmd_selftest,
}


# =============================================================================
# CLI Entry Point
# =============================================================================

def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--profile", choices=sorted(PROFILES), help="Model profile (train; others read the checkpoint)")
    common.add_argument("--seed", type=int,
                        help="Global seed, default 0 or the config seed (overridden by $DIFFSTEREO_SEED)")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    parser = Parser(
        prog="diffstereo.py",
        description="DiffStereo stereo image restoration",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"Available operations: {', '.join(OPERATIONS)}",
    )
    sub = parser.add_subparsers(dest="operation", metavar="operation", parser_class=Parser)
    sub.required = True
    tasks = [t.value for t in Task]

    p = sub.add_parser("prepare-data", parents=[common], help="Synthesize LQ data and the patch index")
    p.add_argument("--manifest", help="JSON-lines manifest of HQ pairs")
    p.add_argument("--root", help="Dataset root with hq/<id>_L.png and hq/<id>_R.png")
    p.add_argument("--task", choices=tasks, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-h", type=int, default=30)
    p.add_argument("--patch-w", type=int, default=90)
    p.add_argument("--stride", type=int, default=20)

    p = sub.add_parser("train", parents=[common], help="Run training stage 1 or 2")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--resume", help="Checkpoint to resume from")
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("infer", parents=[common], help="Restore one LQ stereo pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--task", choices=tasks, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM report over a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", choices=tasks)
    p.add_argument("--report")

    p = sub.add_parser("dump-lhfr", parents=[common], help="Write sampled LHFR maps as images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-step", action="store_true", help="Dump every step Z_T .. Z_0")

    sub.add_parser("selftest", parents=[common], help="Run the invariant suite")
    return parser


def run(argv: List[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except UsageError as e:
        print(json.dumps(error_response(str(e)), indent=2))
        return 1

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        result = OPERATIONS[args.operation](args)
    except DiffStereoError as e:
        result, code = error_response(str(e)), 1
    except Exception as e:
        logger.debug("Internal error", exc_info=True)
        result, code = error_response(f"Internal error: {type(e).__name__}: {e}"), 2
    else:
        code = 0 if result["status"] == "success" else 1

    print(json.dumps(result, indent=2))
    return code


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
