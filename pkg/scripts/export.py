#!/usr/bin/env python3
"""
Result writers: CSV tables, run manifests and console summaries.

CSV files use '.' decimals, a header row, '\\n' line endings and 17 significant
digits so reruns are byte-identical. Manifests list every output with its
size and sha256 and carry no timestamps.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Optional, Union

import pandas as pd
from tabulate import tabulate

PathLike = Union[str, Path]

FLOAT_FORMAT = "%.17g"
MANIFEST_TEMPLATE = "manifest-{command}.json"


def write_table(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")
    return path


def file_digest(path: PathLike) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# =============================================================================
# Manifests
# =============================================================================

def build_manifest(
    command: str,
    version: str,
    config_sha256: str,
    seed: Optional[int],
    outputs: Iterable[PathLike],
    root: PathLike,
) -> dict[str, Any]:
    """Manifest of a run; output paths are relative to ``root`` and sorted."""
    root = Path(root)
    entries = []
    for path in sorted({Path(p) for p in outputs}, key=lambda p: p.relative_to(root).as_posix()):
        entries.append({
            "path": path.relative_to(root).as_posix(),
            "bytes": path.stat().st_size,
            "sha256": file_digest(path),
        })
    return {
        "command": command,
        "version": version,
        "config_sha256": config_sha256,
        "seed": seed,
        "outputs": entries,
    }


def write_manifest(manifest: dict[str, Any], out_dir: PathLike) -> Path:
    path = Path(out_dir) / MANIFEST_TEMPLATE.format(command=manifest["command"])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# =============================================================================
# Console summaries
# =============================================================================

def markdown_table(
    headers: list[str],
    rows: list[list[Any]],
    *,
    colalign: Optional[list[str]] = None,
) -> str:
    return tabulate(rows, headers=headers, tablefmt="pipe", colalign=colalign, floatfmt=".4g")


def frame_table(frame: pd.DataFrame, numeric_align: str = "right") -> str:
    headers = [str(c) for c in frame.columns]
    colalign = [numeric_align if pd.api.types.is_numeric_dtype(frame[c]) else "left" for c in frame.columns]
    return markdown_table(headers, frame.values.tolist(), colalign=colalign)
