# utils/records.py

import json
import os
from pathlib import Path
from typing import Any, Iterable, List

from modules.errors import IoFailureError, ManifestParseError


def load_json(filepath: str | Path) -> Any:
    """
    Loads a JSON document.

    Args:
        filepath: path to the JSON file.

    Returns:
        The decoded object.
    """
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestParseError(f"Error decoding JSON from '{filepath}': {e}") from e
    except OSError as e:
        raise IoFailureError(f"Error loading '{filepath}': {e}") from e


def save_json(data: Any, filepath: str | Path) -> None:
    """Writes `data` as pretty, key-sorted JSON (stable bytes for identical input)."""
    try:
        parent = os.path.dirname(str(filepath))
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(filepath, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=4, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise IoFailureError(f"Error saving '{filepath}': {e}") from e


def load_jsonl(filepath: str | Path) -> List[dict]:
    """
    Loads a JSON-lines file, one object per non-blank line.

    Raises ManifestParseError naming the line number on malformed input.
    """
    records = []
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ManifestParseError(f"{filepath}:{lineno}: invalid JSON ({e})") from e
                if not isinstance(obj, dict):
                    raise ManifestParseError(f"{filepath}:{lineno}: expected an object, got {type(obj).__name__}")
                records.append(obj)
    except OSError as e:
        raise IoFailureError(f"Error loading '{filepath}': {e}") from e
    return records


def save_jsonl(records: Iterable[dict], filepath: str | Path) -> None:
    try:
        parent = os.path.dirname(str(filepath))
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(filepath, "w", encoding="utf-8") as f:
            for rec in records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    except OSError as e:
        raise IoFailureError(f"Error saving '{filepath}': {e}") from e


def append_jsonl(record: dict, filepath: str | Path) -> None:
    """Appends one record to a JSON-lines log (used for per-step loss reports)."""
    try:
        with open(filepath, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as e:
        raise IoFailureError(f"Error appending to '{filepath}': {e}") from e
