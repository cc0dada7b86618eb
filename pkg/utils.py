import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np

logger = logging.getLogger(__name__)

def ensure_dir(path: str) -> Path:
    """
    Create a directory (and parents) if it does not exist yet.

    Args:
        path: Directory to create

    Returns:
        The directory as a Path
    """
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    return directory

def derive_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Build an independent random generator for a (seed, stream...) key.

    Sweep points, seeds and dataset splits each get their own stream so that
    results do not depend on execution order or worker count.

    Args:
        seed: Base experiment seed
        *stream: Additional integers identifying the stream

    Returns:
        A seeded numpy Generator
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(s) for s in stream]]))

def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
    """
    Write rows to a CSV file with a fixed header.

    Args:
        path: Output file path
        header: Column names
        rows: Row values, one sequence per row

    Returns:
        Number of rows written
    """
    count = 0
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(header))
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"Row has {len(row)} values, header has {len(header)}")
            writer.writerow([_format_cell(value) for value in row])
            count += 1
    logger.debug(f"Wrote {count} rows to {path}")
    return count

def read_csv(path: str) -> List[Dict[str, str]]:
    """
    Read a CSV file written by write_csv.

    Args:
        path: CSV file path

    Returns:
        List of row dictionaries keyed by header
    """
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))

def _format_cell(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value

def write_json(path: str, payload: Dict[str, Any]) -> None:
    """Write a JSON document with stable key order."""
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")

