import hashlib
import json
import logging
import platform
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from app.storage.files import write_json
from app.storage.grasp_files import SCHEMA_VERSION, plain

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def settings_hash(settings: dict) -> str:
    """sha256 of the compact, key-sorted JSON form of a settings dict."""
    payload = json.dumps(plain(settings), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def versions() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def write_manifest(out_dir, command: str, seed, settings: dict, inputs=(), outputs=()):
    """Record what produced the outputs of a run: settings and their hash, seed, inputs and library versions.

    Output files are listed relative to out_dir with their sha256; no wall-clock data is written.
    """
    out_dir = Path(out_dir)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "seed": seed,
        "config_hash": settings_hash(settings),
        "settings": plain(settings),
        "inputs": {str(p): file_digest(p) for p in inputs if Path(p).is_file()},
        "outputs": {
            Path(p).relative_to(out_dir).as_posix() if Path(p).is_relative_to(out_dir) else str(p): file_digest(p)
            for p in outputs
        },
        "versions": versions(),
    }
    path = write_json(out_dir / MANIFEST_NAME, manifest)
    logger.info(f"Manifest written to {path}")
    return path
