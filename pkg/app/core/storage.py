from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from app import __version__
from app.core.errors import FitFileError
from app.core.models.chain_models import ModelVariant, RunManifest
from app.core.models.draws_models import CohortSnapshot, PosteriorDraws
from app.core.services.splines import SplineBases

FIT_MAGIC: bytes = b"JMFIT\x00\x01\n"
SCHEMA_VERSION: int = 1
FIT_FILE = "fit.jmfit"
MANIFEST_FILE = "manifest.json"
_LENGTH = struct.Struct("<Q")
_DTYPE = np.dtype("<f8")


class ColumnSpec(BaseModel):
    name: str
    shape: list[int]
    offset: int = Field(ge=0)


class FitHeader(BaseModel):
    schema_version: int
    tool_version: str
    variant: ModelVariant
    seed: int
    config: dict[str, Any]
    bases: dict[str, Any]
    cohort: dict[str, Any]
    notes: list[str] = Field(default_factory=list)
    columns: list[ColumnSpec]


def _header_for(draws: PosteriorDraws) -> FitHeader:
    offset = 0
    columns: list[ColumnSpec] = []
    for name in sorted(draws.columns):
        values = draws.columns[name]
        columns.append(ColumnSpec(name=name, shape=list(values.shape), offset=offset))
        offset += values.size * _DTYPE.itemsize
    return FitHeader(
        schema_version=SCHEMA_VERSION,
        tool_version=__version__,
        variant=draws.variant,
        seed=draws.seed,
        config=draws.config,
        bases=draws.bases.to_payload(),
        cohort=draws.cohort.to_payload(),
        notes=list(draws.notes),
        columns=columns,
    )


def write_fit(draws: PosteriorDraws, path: str | Path) -> Path:
    """Magic bytes, header length, sorted-key JSON header, then little-endian float64 columns."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    header = _header_for(draws)
    encoded = json.dumps(header.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode("utf-8")

    with target.open("wb") as handle:
        handle.write(FIT_MAGIC)
        handle.write(_LENGTH.pack(len(encoded)))
        handle.write(encoded)
        for column in header.columns:
            handle.write(np.ascontiguousarray(draws.columns[column.name], dtype=_DTYPE).tobytes())
    return target


def read_fit(path: str | Path) -> PosteriorDraws:
    source = Path(path)
    if not source.is_file():
        raise FitFileError(f"Fit file '{source}' does not exist.")
    raw = source.read_bytes()

    if not raw.startswith(FIT_MAGIC):
        raise FitFileError(f"'{source}' is not a fit-result file.")
    start = len(FIT_MAGIC)
    if len(raw) < start + _LENGTH.size:
        raise FitFileError(f"Fit file '{source}' is truncated.")
    (length,) = _LENGTH.unpack_from(raw, start)
    body = start + _LENGTH.size + length

    try:
        payload = json.loads(raw[start + _LENGTH.size : body].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FitFileError(f"Fit file '{source}' has an unreadable header: {exc}") from exc
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise FitFileError(
            f"Fit file '{source}' has schema version {payload.get('schema_version')}, expected {SCHEMA_VERSION}."
        )
    try:
        header = FitHeader.model_validate(payload)
    except ValidationError as exc:
        raise FitFileError(f"Fit file '{source}' has an invalid header: {exc.errors()}") from exc

    columns: dict[str, np.ndarray] = {}
    data = memoryview(raw)[body:]
    for column in header.columns:
        count = int(np.prod(column.shape))
        stop = column.offset + count * _DTYPE.itemsize
        if stop > len(data):
            raise FitFileError(f"Fit file '{source}' is truncated in column '{column.name}'.")
        values = np.frombuffer(data[column.offset : stop], dtype=_DTYPE).reshape(column.shape)
        columns[column.name] = values.astype(float)

    if "h" not in columns or columns["h"].shape[1] == 0:
        raise FitFileError(f"Fit file '{source}' holds no retained draws.")

    return PosteriorDraws(
        columns=columns,
        variant=header.variant,
        bases=SplineBases.from_payload(header.bases),
        cohort=CohortSnapshot.from_payload(header.cohort),
        seed=header.seed,
        config=header.config,
        notes=list(header.notes),
    )


def write_json(payload: dict[str, Any], path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return target


def write_manifest(manifest: RunManifest, out_dir: str | Path) -> Path:
    """manifest.json next to the outputs it describes."""
    return write_json(manifest.model_dump(mode="json"), Path(out_dir) / MANIFEST_FILE)
