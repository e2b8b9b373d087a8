#!/usr/bin/env python3
"""
FittedModel artifact: a single Arrow IPC file.

Arrays live in rows of (name, shape, values); everything else (spec, scalar
diagnostics, levels, lookup tables) is canonical JSON in the schema metadata.
Saving a loaded model reproduces the original bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import pyarrow as pa

if __package__:
    from .basis import SmoothSpec, restore_block
    from .gamm import FitDiagnostics, FittedModel, ModelSpec
else:
    from basis import SmoothSpec, restore_block
    from gamm import FitDiagnostics, FittedModel, ModelSpec

PathLike = Union[str, Path]

FORMAT_NAME = "agworkforce-model"
FORMAT_VERSION = 1
METADATA_KEY = b"agworkforce.model"

ARRAYS_SCHEMA = pa.schema([
    pa.field("name", pa.string(), nullable=False),
    pa.field("shape", pa.list_(pa.int64()), nullable=False),
    pa.field("values", pa.list_(pa.float64()), nullable=False),
])


class ModelFormatError(ValueError):
    """Raised when a model artifact cannot be decoded."""


# =============================================================================
# Encoding
# =============================================================================

def _encode(model: FittedModel, prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, Any]:
    arrays[f"{prefix}coefficients"] = model.coefficients
    arrays[f"{prefix}lambdas"] = model.lambdas
    arrays[f"{prefix}covariance"] = model.covariance
    arrays[f"{prefix}pll_trace"] = np.array(model.diagnostics.pll_trace, dtype=np.float64)
    arrays[f"{prefix}gcv_path"] = np.array(model.diagnostics.gcv_path, dtype=np.float64).reshape(-1, 3)

    blocks = []
    for i, block in enumerate(model.blocks):
        for j, pen in enumerate(block.penalties):
            arrays[f"{prefix}block{i}/penalty{j}"] = pen
        for key, value in block.state.items():
            arrays[f"{prefix}block{i}/state/{key}"] = value
        blocks.append({
            "levels": list(block.levels),
            "n_coef": block.n_coef,
            "n_penalties": block.n_penalties,
            "penalty_scales": [float(s) for s in block.penalty_scales],
            "state_keys": sorted(block.state),
        })

    d = model.diagnostics
    meta: dict[str, Any] = {
        "spec": {
            "structure": model.spec.structure,
            "grouping": model.spec.grouping,
            "terms": [
                {
                    "kind": t.kind,
                    "variables": list(t.variables),
                    "rank": list(t.rank),
                    "penalty_order": t.penalty_order,
                }
                for t in model.spec.terms
            ],
        },
        "phi": float(model.phi),
        "feature_ranges": {k: [float(lo), float(hi)] for k, (lo, hi) in model.feature_ranges.items()},
        "country_regions": dict(model.country_regions),
        "diagnostics": {
            "n": d.n,
            "deviance": float(d.deviance),
            "loglik": float(d.loglik),
            "edf": float(d.edf),
            "gcv": float(d.gcv),
            "iterations": d.iterations,
            "converged": bool(d.converged),
        },
        "blocks": blocks,
        "regional": None,
    }
    if model.regional is not None:
        meta["regional"] = _encode(model.regional, f"{prefix}regional/", arrays)
    return meta


def model_to_table(model: FittedModel) -> pa.Table:
    arrays: dict[str, np.ndarray] = {}
    meta = _encode(model, "", arrays)
    meta["format"] = FORMAT_NAME
    meta["format_version"] = FORMAT_VERSION

    names = sorted(arrays)
    shapes = [list(np.asarray(arrays[n]).shape) for n in names]
    values = [np.asarray(arrays[n], dtype=np.float64).ravel().tolist() for n in names]
    schema = ARRAYS_SCHEMA.with_metadata({METADATA_KEY: json.dumps(meta, sort_keys=True).encode("utf-8")})
    return pa.table({"name": names, "shape": shapes, "values": values}, schema=schema)


def save_model(model: FittedModel, path: PathLike) -> Path:
    table = model_to_table(model)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with pa.OSFile(str(path), "wb") as sink:
        with pa.ipc.new_file(sink, table.schema) as writer:
            writer.write_table(table)
    return path


# =============================================================================
# Decoding
# =============================================================================

def _decode(meta: dict[str, Any], prefix: str, arrays: dict[str, np.ndarray]) -> FittedModel:
    def get(name: str) -> np.ndarray:
        key = f"{prefix}{name}"
        if key not in arrays:
            raise ModelFormatError(f"model artifact missing array '{key}'")
        return arrays[key]

    spec_meta = meta["spec"]
    terms = tuple(
        SmoothSpec(t["kind"], tuple(t["variables"]), tuple(t["rank"]), t["penalty_order"])
        for t in spec_meta["terms"]
    )
    spec = ModelSpec(terms, spec_meta["structure"], spec_meta["grouping"])

    blocks = []
    for i, (term, bmeta) in enumerate(zip(terms, meta["blocks"])):
        penalties = [get(f"block{i}/penalty{j}") for j in range(bmeta["n_penalties"])]
        state = {k: get(f"block{i}/state/{k}") for k in bmeta["state_keys"]}
        blocks.append(restore_block(
            term, state, penalties, bmeta["penalty_scales"], bmeta["levels"], bmeta["n_coef"]
        ))

    d = meta["diagnostics"]
    gcv_path = get("gcv_path")
    diagnostics = FitDiagnostics(
        n=d["n"],
        deviance=d["deviance"],
        loglik=d["loglik"],
        edf=d["edf"],
        gcv=d["gcv"],
        iterations=d["iterations"],
        converged=d["converged"],
        pll_trace=tuple(float(v) for v in get("pll_trace")),
        gcv_path=tuple((int(r[0]), float(r[1]), float(r[2])) for r in gcv_path),
    )
    regional: Optional[FittedModel] = None
    if meta.get("regional") is not None:
        regional = _decode(meta["regional"], f"{prefix}regional/", arrays)

    return FittedModel(
        spec=spec,
        blocks=tuple(blocks),
        coefficients=get("coefficients"),
        lambdas=get("lambdas"),
        phi=meta["phi"],
        covariance=get("covariance"),
        feature_ranges={k: (v[0], v[1]) for k, v in meta["feature_ranges"].items()},
        diagnostics=diagnostics,
        country_regions=meta["country_regions"],
        regional=regional,
    )


def model_from_table(table: pa.Table) -> FittedModel:
    raw = (table.schema.metadata or {}).get(METADATA_KEY)
    if raw is None:
        raise ModelFormatError("not an agworkforce model artifact (metadata missing)")
    meta = json.loads(raw.decode("utf-8"))
    if meta.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"unexpected artifact format {meta.get('format')!r}")
    if meta.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {meta.get('format_version')!r}")

    arrays: dict[str, np.ndarray] = {}
    for name, shape, values in zip(
        table.column("name").to_pylist(),
        table.column("shape").to_pylist(),
        table.column("values").to_pylist(),
    ):
        arrays[name] = np.array(values, dtype=np.float64).reshape(shape)
    return _decode(meta, "", arrays)


def load_model(path: PathLike) -> FittedModel:
    with pa.OSFile(str(path), "rb") as source:
        table = pa.ipc.open_file(source).read_all()
    return model_from_table(table)
