import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from colorama import Fore, Style
from colorama import init as colorama_init

from app.config import (
    SYNTH_KINDS,
    TTA_MODES,
    CostWeights,
    Q1Params,
    RunConfig,
    TtaConfig,
    configure_logging,
    get_output_dir,
    load_run_config,
)
from app.errors import VALIDATION_ERRORS, ConfigError
from app.experiments.ablations import STUDIES, run_study
from app.geometry.cloud import read_cloud, write_cloud
from app.geometry.synth import synth_object
from app.kinematics.hand_config import load_hand_file
from app.matching.hungarian import cost_matrix, hungarian
from app.metrics.diversity import DEFAULT_BINS
from app.metrics.selection import evaluate_set, report_frame, select_top_k
from app.storage.files import read_json, write_csv, write_json
from app.storage.grasp_files import read_grasp_set, write_assignment, write_grasp_set
from app.storage.manifest import write_manifest
from app.storage.traces import merge_summaries, summary_frame, summary_row, write_trace
from app.training.dsmt import merged_trace, run_dsmt
from app.training.toy import load_objects, load_targets
from app.tta.refine import refine_set

logger = logging.getLogger(__name__)


def status(message, ok=True):
    colour = Fore.GREEN if ok else Fore.RED
    print(f"{colour}{message}{Style.RESET_ALL}", file=sys.stderr)


def _out_dir(args):
    return Path(args.out) if args.out else get_output_dir() / args.command


def _settings(args):
    return {k: v for k, v in sorted(vars(args).items()) if k != "handler"}


def _optional_config(args):
    return load_run_config(args.config) if args.config else None


def _hand_for(args, grasp_file):
    hand = args.hand or read_json(grasp_file).get("hand")
    if not hand:
        raise ConfigError(f"{grasp_file}: no hand reference; pass --hand")
    return load_hand_file(hand)


def cmd_refine(args):
    out_dir = _out_dir(args)
    config = _optional_config(args)
    tta = config.tta if config else TtaConfig()
    flags = (("mode", args.mode), ("steps", args.steps), ("beta_t", args.beta_t))
    overrides = {k: v for k, v in flags if v is not None}
    tta = TtaConfig.from_dict({**tta.to_dict(), **overrides})
    model = _hand_for(args, args.grasps)
    grasps = read_grasp_set(args.grasps, model)
    cloud = read_cloud(args.cloud, args.scale)

    refined, summary, trace = refine_set(model, grasps, cloud, tta)
    outputs = [
        write_grasp_set(out_dir / "refined.json", refined),
        write_trace(out_dir / "trace.csv", trace),
        write_trace(out_dir / "summary.csv", summary),
    ]
    settings = {**_settings(args), "tta": tta.to_dict()}
    write_manifest(out_dir, "refine", args.seed, settings, [args.grasps, args.cloud], outputs)
    status(f"Refined {len(refined)} grasps ({tta.mode}) -> {out_dir}")


def cmd_evaluate(args):
    out_dir = _out_dir(args)
    config = _optional_config(args)
    params = replace(config.q1 if config else Q1Params(), seed=args.seed)
    model = _hand_for(args, args.grasps)
    grasps = read_grasp_set(args.grasps, model)
    cloud = read_cloud(args.cloud, args.scale)
    if args.top_k is not None:
        grasps = select_top_k(grasps, model, cloud, args.top_k, params.contact_threshold)

    report = evaluate_set(model, grasps, cloud, params, args.bins)
    outputs = [
        write_json(out_dir / "metrics.json", report.to_dict()),
        write_csv(out_dir / "grasps.csv", report_frame(report, grasps)),
        write_trace(
            out_dir / "summary.csv",
            summary_frame([summary_row("evaluate", grasps.object_id, report.set_fields())]),
        ),
    ]
    settings = {**_settings(args), "q1": params.to_dict()}
    write_manifest(out_dir, "evaluate", args.seed, settings, [args.grasps, args.cloud], outputs)
    fields = report.set_fields()
    status(
        f"Q1 {fields['mean_q1']:.4f} | pen {fields['mean_penetration_cm']:.3f} cm | "
        f"eta_np {fields['eta_np']:.1f}% | eta_tb {fields['eta_tb']:.1f}% | "
        f"delta t/r/q {fields['delta_t']:.1f}/{fields['delta_r']:.1f}/{fields['delta_q']:.1f}%"
    )


def _run_config(args) -> RunConfig:
    config = load_run_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.scale != 1.0:
        config = replace(config, objects=tuple(replace(s, scale=s.scale * args.scale) for s in config.objects))
    return config


def _config_out_dir(args, config):
    if args.out:
        return Path(args.out)
    return Path(config.output_dir) if config.output_dir else get_output_dir() / args.command


def cmd_train_toy(args):
    config = _run_config(args)
    out_dir = _config_out_dir(args, config)
    model = load_hand_file(config.hand)
    clouds = load_objects(config)
    targets = load_targets(model, config, clouds, out_dir)

    results = run_dsmt(model, config, clouds, targets)
    outputs = [write_trace(out_dir / "trace.csv", merged_trace(results))]
    summary = {}
    for name, result in results.items():
        outputs.append(write_grasp_set(out_dir / "tables" / f"{name}.json", result.table.grasp_set(model)))
        if result.static_assignment is not None:
            outputs.append(
                write_assignment(out_dir / "static_matching" / f"{name}.json", result.static_assignment, object=name)
            )
        summary[name] = result.trace.final
    outputs.append(write_json(out_dir / "summary.json", summary))
    outputs.extend(sorted((out_dir / "targets").glob("*.json")))
    write_manifest(out_dir, "train-toy", config.seed, config.to_dict(), [args.config], outputs)
    status(f"Trained {len(results)} object(s) for {config.schedule.total_epochs} epochs -> {out_dir}")


def cmd_match(args):
    out_dir = _out_dir(args)
    config = _optional_config(args)
    cost_weights = config.cost if config else CostWeights()
    model = _hand_for(args, args.pred)
    preds = read_grasp_set(args.pred, model)
    gts = read_grasp_set(args.gt, model)

    cost = cost_matrix(model, preds, gts, cost_weights)
    assignment = hungarian(cost)
    outputs = [write_assignment(out_dir / "assignment.json", assignment, predictions=args.pred, ground_truths=args.gt)]
    settings = {**_settings(args), "cost": cost_weights.to_dict()}
    write_manifest(out_dir, "match", args.seed, settings, [args.pred, args.gt], outputs)
    status(f"Matched {assignment.size} pairs, total cost {assignment.total_cost:.6f}")


def cmd_report(args):
    out_dir = _out_dir(args)
    table = merge_summaries(args.inputs)
    outputs = [write_trace(out_dir / "report.csv", table)]
    write_manifest(out_dir, "report", args.seed, _settings(args), args.inputs, outputs)
    status(f"Merged {len(args.inputs)} file(s) into {len(table)} rows")


def cmd_synth(args):
    out_dir = _out_dir(args)
    size = tuple(np.asarray(args.size, dtype=float) * args.scale)
    name = args.name or args.kind
    cloud = synth_object(args.kind, size, args.points, args.seed, tuple(args.center), args.axis, name=name)
    path = write_cloud(out_dir / f"{cloud.name}.{args.format}", cloud)
    write_manifest(out_dir, "synth", args.seed, _settings(args), (), [path])
    status(f"Wrote {cloud.size} points to {path}")


def cmd_ablate(args):
    config = _run_config(args)
    out_dir = _config_out_dir(args, config)
    model = load_hand_file(config.hand)
    path = run_study(model, config, args.study, out_dir)
    write_manifest(path.parent, "ablate", config.seed, {**config.to_dict(), "study": args.study}, [args.config], [path])
    status(f"Study '{args.study}' written to {path}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--scale", type=float, default=1.0, help="multiply cloud coordinates (or primitive sizes) by this"
    )
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides the run config)")
    common.add_argument("--out", default=None, help="output directory (default $GRASP_OUTPUT_DIR/<command>)")
    common.add_argument("--log-level", default=None, help="overrides GRASP_LOG_LEVEL")

    parser = argparse.ArgumentParser(prog="grasp", description="Grasp-set optimization pipelines")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("refine", parents=[common], help="refine a grasp set with test-time adaptation")
    p.add_argument("--grasps", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--hand", default=None)
    p.add_argument("--config", default=None, help="run config whose tta section is used")
    p.add_argument("--mode", choices=TTA_MODES, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--beta-t", type=float, default=None)
    p.set_defaults(handler=cmd_refine)

    p = sub.add_parser("evaluate", parents=[common], help="quality and diversity metrics of a grasp set")
    p.add_argument("--grasps", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--hand", default=None)
    p.add_argument("--config", default=None, help="run config whose q1 section is used")
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("train-toy", parents=[common], help="dynamic-static matching training on the toy task")
    p.add_argument("--config", required=True)
    p.set_defaults(handler=cmd_train_toy)

    p = sub.add_parser("match", parents=[common], help="one-shot Hungarian matching of two grasp sets")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--hand", default=None)
    p.add_argument("--config", default=None, help="run config whose cost section is used")
    p.set_defaults(handler=cmd_match)

    p = sub.add_parser("report", parents=[common], help="merge metrics summaries and traces into one table")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic object cloud")
    p.add_argument("kind", choices=SYNTH_KINDS)
    p.add_argument("--size", type=float, nargs="+", default=[0.04])
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--center", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--name", default=None)
    p.add_argument("--format", choices=("ply", "xyz"), default="ply")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation sweep on the toy task")
    p.add_argument("--config", required=True)
    p.add_argument("--study", choices=STUDIES, required=True)
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv=None):
    """Run one subcommand; returns 0 on success, 1 on validation errors, 2 on runtime failures."""
    colorama_init()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    configure_logging(args.log_level)
    if args.seed is None and args.command in ("refine", "evaluate", "match", "report", "synth"):
        args.seed = 0
    try:
        args.handler(args)
    except VALIDATION_ERRORS as e:
        logger.error(f"{args.command}: {e}")
        status(f"error: {e}", ok=False)
        return 1
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        status(f"failed: {e}", ok=False)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
