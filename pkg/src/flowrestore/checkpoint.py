"""Named-tensor checkpoint archives with header manifests and fingerprints.

Every trained artifact (codec, backbone, adapter) is stored as a single
file holding a header dict (plain JSON-serializable metadata, including a
format-version integer) plus a flat map of named tensors. Loaders validate
the header before touching any weights, so incompatible files fail early
with a clear error instead of a shape mismatch deep inside a forward pass.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from typing import Any

import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised for malformed archives or header/content mismatches."""


def save_archive(path: str, header: dict[str, Any], tensors: dict[str, torch.Tensor]) -> None:
    """Write header + named tensors atomically (tmp file, then rename)."""
    payload = {
        "format_version": FORMAT_VERSION,
        "header": dict(header),
        "tensors": {k: v.detach().cpu() for k, v in tensors.items()},
    }
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_archive(path: str, expected_kind: str | None = None) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "header" not in payload or "tensors" not in payload:
        raise CheckpointError(f"not a checkpoint archive: {path}")
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version!r} in {path}")
    header = payload["header"]
    if expected_kind is not None and header.get("kind") != expected_kind:
        raise CheckpointError(
            f"expected a {expected_kind!r} checkpoint, got {header.get('kind')!r} in {path}"
        )
    return header, payload["tensors"]


def fingerprint_tensors(tensors: dict[str, torch.Tensor], extra: dict[str, Any] | None = None) -> str:
    """sha256 over sorted tensor names, shapes, and raw little-endian bytes.

    Stable across process restarts; any bitwise parameter change alters it.
    """
    digest = hashlib.sha256()
    if extra:
        digest.update(json.dumps(extra, sort_keys=True).encode())
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tuple(t.shape)).encode())
        digest.update(str(t.dtype).encode())
        digest.update(t.numpy().tobytes())
    return digest.hexdigest()


def fingerprint_module(module: torch.nn.Module, extra: dict[str, Any] | None = None) -> str:
    return fingerprint_tensors(dict(module.state_dict()), extra=extra)
