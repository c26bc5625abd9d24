import hashlib
import json
import os
from datetime import datetime, timezone

import numpy as np
import pandas as pd

FLOAT_FORMAT = "%.17g"


class NumpyEncoder(json.JSONEncoder):
    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, np.bool_):
            return bool(obj)
        return super().default(obj)


def format_g17(value: float) -> str:
    """Shortest-safe round-trip decimal: 17 significant digits."""
    return FLOAT_FORMAT % value


def to_jsonable(data):
    return json.loads(json.dumps(data, cls=NumpyEncoder))


def config_digest(config: dict) -> str:
    """sha256 of the canonical JSON form of a resolved config."""
    text = json.dumps(config, cls=NumpyEncoder, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def run_header(config: dict, version: str) -> dict:
    return {
        "version": version,
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config_sha256": config_digest(config),
        "config": to_jsonable(config),
    }


def write_csv(frame: pd.DataFrame, path: str, header: dict):
    """CSV with a '#'-prefixed JSON header line and 17-digit floats."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("# " + json.dumps(header, cls=NumpyEncoder, sort_keys=True) + "\n")
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def read_csv(path: str) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def read_header(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
    if not first.startswith("# "):
        raise ValueError(f"{path} has no run header")
    return json.loads(first[2:])
