"""Single-file container for named parameter arrays plus a JSON metadata record.

Backed by safetensors (little-endian, no pickling). Arrays keep their dtype, so
float32 models store 32-bit floats and float64 (gradient-test) models 64-bit.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path
from typing import Any, Mapping, Union

import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file

FORMAT_VERSION = 1
PathLike = Union[str, os.PathLike]


class CheckpointError(Exception):
    """Base class for checkpoint problems."""


class CheckpointReadError(CheckpointError):
    pass


class FormatVersionError(CheckpointError):
    pass


def save_container(path: PathLike, tensors: Mapping[str, torch.Tensor], metadata: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {"format_version": FORMAT_VERSION, "creation_time": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    record.update(metadata)
    arrays = {k: v.detach().cpu().contiguous().clone() for k, v in tensors.items()}
    tmp = path.with_name(path.name + ".tmp")
    save_file(arrays, str(tmp), metadata={"record": json.dumps(record, sort_keys=True)})
    os.replace(tmp, path)
    return path


def load_container(path: PathLike, format_version: int = FORMAT_VERSION) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointReadError(f"checkpoint not found: {path}")
    try:
        tensors = load_file(str(path))
        with safe_open(str(path), framework="pt") as f:
            raw = (f.metadata() or {}).get("record")
    except (SafetensorError, OSError, ValueError) as exc:
        raise CheckpointReadError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw is None:
        raise CheckpointReadError(f"{path} has no metadata record")
    try:
        record = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CheckpointReadError(f"{path}: corrupt metadata record") from exc
    found = record.get("format_version")
    if found != format_version:
        raise FormatVersionError(f"{path}: format_version {found}, expected {format_version}")
    return tensors, record
