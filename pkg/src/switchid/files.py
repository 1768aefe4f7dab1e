"""Atomic file output shared by the dataset, model and report writers"""
import json
import math
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path

ENCODING = "utf8"


@contextmanager
def atomic_path(file_path):
    """Yield a temporary path next to ``file_path`` and move it in place on success

    Readers never observe a partially written file: the temporary file is
    renamed over the target only when the block completes, and removed when it
    raises.
    """
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    handle, tmp_name = tempfile.mkstemp(
        prefix=f".{file_path.name}.", suffix=".tmp", dir=file_path.parent
    )
    os.close(handle)
    tmp_path = Path(tmp_name)
    try:
        yield tmp_path
        os.replace(tmp_path, file_path)
    finally:
        if tmp_path.exists():
            tmp_path.unlink()


def json_safe(content):
    """Replace non-finite floats by None, recursively, so the content is strict JSON"""
    if isinstance(content, float) and not math.isfinite(content):
        return None
    if isinstance(content, dict):
        return {key: json_safe(value) for key, value in content.items()}
    if isinstance(content, (list, tuple)):
        return [json_safe(value) for value in content]
    return content


def write_text(file_path, content: str) -> None:
    with atomic_path(file_path) as tmp_path:
        tmp_path.write_text(content, encoding=ENCODING)


def write_json(file_path, content) -> None:
    write_text(
        file_path, json.dumps(json_safe(content), indent=4, sort_keys=True, allow_nan=False)
    )
