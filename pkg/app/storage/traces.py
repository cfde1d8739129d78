import logging
from pathlib import Path

import pandas as pd

from app.errors import FileFormatError
from app.storage.files import write_csv

logger = logging.getLogger(__name__)

# Set-level columns in the order of the results table: quality, then diversity.
SUMMARY_COLUMNS = [
    "run",
    "object",
    "mean_q1",
    "mean_penetration_cm",
    "eta_np",
    "eta_tb",
    "delta_t",
    "delta_r",
    "delta_q",
    "similarity",
    "grasp_count",
]


def write_trace(path, frame: pd.DataFrame):
    write_csv(path, frame)
    logger.info(f"Trace with {len(frame)} rows written to {path}")
    return path


def read_trace(path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise FileFormatError(f"trace file not found: {path}")
    try:
        return pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FileFormatError(f"{path}: unreadable trace ({e})")


def summary_row(run: str, object_id: str, set_fields: dict) -> dict:
    row = {"run": run, "object": object_id}
    row.update({column: set_fields.get(column) for column in SUMMARY_COLUMNS[2:]})
    return row


def summary_frame(rows) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=SUMMARY_COLUMNS)


def merge_summaries(paths) -> pd.DataFrame:
    """Stack metrics summaries (CSV) or train traces (last epoch per object) into one table."""
    rows = []
    for path in paths:
        frame = read_trace(path)
        if "mean_q1" in frame.columns:
            if "run" not in frame.columns:
                frame = frame.assign(run=Path(path).parent.name)
            if "object" not in frame.columns:
                frame = frame.assign(object="")
            rows.extend(frame.reindex(columns=SUMMARY_COLUMNS).to_dict("records"))
        elif "epoch" in frame.columns:
            if "object" not in frame.columns:
                frame = frame.assign(object="")
            last = frame.sort_values("epoch", kind="stable").groupby("object", sort=False).tail(1)
            for record in last.to_dict("records"):
                rows.append(
                    {
                        "run": Path(path).parent.name,
                        "object": record["object"],
                        "mean_penetration_cm": record["mean_penetration_cm"],
                        "similarity": record["similarity"],
                    }
                )
        else:
            raise FileFormatError(f"{path}: neither a metrics summary nor a training trace")
    return summary_frame(rows)
