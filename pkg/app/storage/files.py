import io
import json
import logging
import os
import tempfile
from pathlib import Path

import pandas as pd

from app.errors import FileFormatError

logger = logging.getLogger(__name__)


def atomic_write_text(path, text):
    """Write the whole file or nothing: temp file in the same directory, then os.replace."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
        os.replace(temp_name, path)
    except Exception as e:
        logger.error(f"Error writing {path}: {e}")
        if os.path.exists(temp_name):
            os.remove(temp_name)
        raise
    return path


def dump_json(data):
    """Stable JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def write_json(path, data):
    return atomic_write_text(path, dump_json(data))


def read_json(path):
    path = Path(path)
    if not path.is_file():
        raise FileFormatError(f"file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FileFormatError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})")


def write_csv(path, df: pd.DataFrame):
    buffer = io.StringIO()
    df.to_csv(buffer, index=False, lineterminator="\n", float_format="%.10g")
    return atomic_write_text(path, buffer.getvalue())
