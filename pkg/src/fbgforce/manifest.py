from __future__ import annotations

import base64
import hashlib
import json
import platform
import sys
from enum import Enum
from pathlib import Path

import numpy as np

MANIFEST_VERSION = 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, Enum):
        return obj.value
    return obj


def dumps(payload: dict) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"


def config_hash(config: dict) -> str:
    """Deterministic short hash of a resolved configuration.

    Formula: "cfg_" + base32(blake2s(canonical json, digest_size=16))[:12]
    """
    payload = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    digest = hashlib.blake2s(payload.encode(), digest_size=16).digest()
    b32 = base64.b32encode(digest).decode().rstrip("=")
    return f"cfg_{b32[:12]}"


def build_manifest(command: str, config: dict, **extra) -> dict:
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
    }
    manifest.update(extra)
    return manifest


def write_manifest(manifest: dict, path: Path | str) -> Path:
    from fbgforce.dataio import atomic_write_text

    path = Path(path)
    atomic_write_text(path, dumps(manifest))
    return path


def read_manifest(path: Path | str) -> dict:
    return json.loads(Path(path).read_text())


def host_descriptor() -> dict:
    """Where timings were measured; latency numbers are only comparable per host."""
    return {
        "python": sys.version.split(" ")[0],
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "numpy": np.__version__,
    }
