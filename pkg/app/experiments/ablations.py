import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from app.config import RunConfig, StageSchedule, TTA_MODES
from app.metrics.selection import evaluate_set
from app.models import HandModel
from app.storage.traces import summary_frame, summary_row, write_trace
from app.training.dsmt import merged_trace, run_dsmt
from app.training.toy import load_objects, load_targets
from app.tta.refine import refine_set

logger = logging.getLogger(__name__)

STUDIES = ("dsmt", "penalty", "queries", "tta")
# Multiples of the configured lambda6; the last one drives the dynamic table into collapse at desk scale.
PENALTY_SCALES = (0.0, 0.1, 1.0, 10.0, 10000.0)
QUERY_COUNTS = (4, 8, 16, 32)


def stage_variants(schedule: StageSchedule) -> dict:
    """Stage ablations: full schedule, dynamic only, without warm-up, without penalty stage, without static matching."""
    total = schedule.total_epochs
    return {
        "dsmt": schedule,
        "dmt": replace(schedule, dmt_epochs=total, smw_epochs=0, smpt_epochs=0),
        "no_warm": replace(schedule, smw_epochs=0, smpt_epochs=schedule.smw_epochs + schedule.smpt_epochs),
        "dmt_smw": replace(schedule, smw_epochs=schedule.smw_epochs + schedule.smpt_epochs, smpt_epochs=0),
        "no_static": replace(schedule, static_matching=False),
    }


def penalty_variants(config: RunConfig) -> dict:
    """Dynamic matching throughout with a fixed multiple of lambda6, plus the delayed 0 -> 1x switch."""
    schedule, loss = config.schedule, config.loss
    total = schedule.total_epochs
    variants = {}
    for scale in PENALTY_SCALES:
        if scale == 0.0:
            dynamic = replace(schedule, dmt_epochs=total, smw_epochs=0, smpt_epochs=0)
            variants["pen_0"] = replace(config, schedule=dynamic)
            continue
        variants[f"pen_{scale:g}x"] = replace(
            config,
            loss=replace(loss, pen=loss.pen * scale),
            schedule=replace(schedule, dmt_epochs=0, smw_epochs=0, smpt_epochs=total, static_matching=False),
        )
    variants["pen_0_to_1x"] = replace(
        config,
        schedule=replace(
            schedule,
            smw_epochs=0,
            smpt_epochs=schedule.smw_epochs + schedule.smpt_epochs,
            static_matching=False,
        ),
    )
    return variants


def _evaluate(model, config, results, clouds, run, rows):
    for spec in config.objects:
        grasps = results[spec.name].table.grasp_set(model, source=run)
        report = evaluate_set(model, grasps, clouds[spec.name], config.q1)
        rows.append(summary_row(run, spec.name, report.set_fields()))


def _train_variants(model, config, variants, clouds, targets, out_dir):
    rows = []
    for run, variant in variants.items():
        logger.info(f"Running variant '{run}'")
        results = run_dsmt(model, variant, clouds, targets)
        write_trace(Path(out_dir) / run / "trace.csv", merged_trace(results))
        _evaluate(model, variant, results, clouds, run, rows)
    return rows


def run_study(model: HandModel, config: RunConfig, study: str, out_dir) -> Path:
    """Run one ablation sweep on the toy task and write its summary table."""
    if study not in STUDIES:
        raise ValueError(f"unknown study '{study}', expected one of {list(STUDIES)}")
    out_dir = Path(out_dir) / study
    clouds = load_objects(config)
    targets = load_targets(model, config, clouds, out_dir)

    try:
        if study == "dsmt":
            variants = {k: replace(config, schedule=v) for k, v in stage_variants(config.schedule).items()}
            rows = _train_variants(model, config, variants, clouds, targets, out_dir)
        elif study == "penalty":
            variants = penalty_variants(config)
            rows = _train_variants(model, config, variants, clouds, targets, out_dir)
        elif study == "queries":
            variants = {f"queries_{n}": replace(config, queries=n) for n in QUERY_COUNTS}
            rows = _train_variants(model, config, variants, clouds, targets, out_dir)
        else:
            rows = []
            results = run_dsmt(model, config, clouds, targets)
            _evaluate(model, config, results, clouds, "none", rows)
            for mode in TTA_MODES:
                tta = replace(config.tta, mode=mode)
                for spec in config.objects:
                    coarse = results[spec.name].table.grasp_set(model)
                    refined, summary, _ = refine_set(model, coarse, clouds[spec.name], tta)
                    report = evaluate_set(model, refined, clouds[spec.name], config.q1)
                    row = summary_row(mode, spec.name, report.set_fields())
                    rows.append(row)
                    logger.info(
                        f"[{spec.name}] {mode}: mean contacts {np.mean(summary['final_contacts']):.2f}, "
                        f"eta_np {row['eta_np']:.1f}%"
                    )
    except Exception as e:
        logger.error(f"Error running study '{study}': {e}")
        raise

    path = write_trace(out_dir / "summary.csv", summary_frame(rows))
    logger.info(f"Study '{study}' finished with {len(rows)} rows")
    return path
