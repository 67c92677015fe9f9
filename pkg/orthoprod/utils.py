import json
import math
from pathlib import Path

import numpy as np
import pandas as pd


def parse_comma_separated_values(value):
    """Parse comma-separated values, stripping whitespace and filtering empty strings."""
    if not value:
        return []
    return [item.strip() for item in value.split(',') if item.strip()]


def parse_int_grid(value):
    """Parse a comma-separated list of positive integers such as '500,1000'."""
    items = parse_comma_separated_values(value)
    grid = []
    for item in items:
        try:
            n = int(item)
        except ValueError:
            raise ValueError(f"Not an integer in grid: {item!r}")
        if n <= 0:
            raise ValueError(f"Grid values must be positive, got {n}")
        grid.append(n)
    return grid


def child_seed(seed, *keys):
    """
    Derive an independent integer seed from a master seed and a key path.

    Uses numpy's SeedSequence spawn keys, so the stream for (seed, keys) does
    not depend on how many other streams were drawn or in which order.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def child_rng(seed, *keys):
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(ss)


def ensure_dir(path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating,)):
        value = float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(path, payload):
    """Write a JSON document with stable key order and numpy values converted."""
    path = Path(path)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_jsonable)
        f.write('\n')
    return path


def write_csv_rows(path, rows, columns=None):
    """Write a list of dict rows as an RFC-4180 CSV with deterministic float formatting."""
    path = Path(path)
    frame = pd.DataFrame(rows, columns=columns)
    frame.to_csv(path, index=False, float_format='%.10g', lineterminator='\n')
    return path


def append_jsonl(path, record):
    with open(path, 'a', encoding='utf-8') as f:
        f.write(json.dumps(record, sort_keys=True, default=_jsonable))
        f.write('\n')
