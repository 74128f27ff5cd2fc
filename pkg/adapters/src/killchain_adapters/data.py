"""Shared helpers: engine dataset JSONL reading and atomic file writes.

The adapters talk to the engine exclusively through its documented file
formats, so this module re-implements the tiny readers it needs instead of
importing the engine.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable


@dataclass
class DatasetRow:
    technique_id: str
    label: str
    phase: str
    text: str


def read_dataset(path: str | Path) -> list[DatasetRow]:
    """Engine dataset JSONL: {"technique_id", "label", "phase", "text"}."""
    rows: list[DatasetRow] = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rows.append(
                    DatasetRow(
                        technique_id=str(obj["technique_id"]),
                        label=str(obj["label"]),
                        phase=str(obj["phase"]),
                        text=str(obj["text"]),
                    )
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise SystemExit(f"{path}: line {lineno}: bad dataset row ({exc})")
    if not rows:
        raise SystemExit(f"{path}: dataset file is empty")
    return rows


def require_unique_ids(rows: list[DatasetRow], path: str | Path) -> None:
    seen: set[str] = set()
    for row in rows:
        if row.technique_id in seen:
            raise SystemExit(f"{path}: duplicate sample id {row.technique_id!r}")
        seen.add(row.technique_id)


def write_lines_atomic(path: str | Path, lines: Iterable[str]) -> None:
    """Write the full file or nothing: temp file plus atomic rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            for line in lines:
                handle.write(line + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
