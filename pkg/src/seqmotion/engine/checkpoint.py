"""Checkpoint format: a text manifest plus one raw little-endian f32 blob.

``save_arrays(path, arrays)`` writes ``<path>.manifest`` (UTF-8 lines of
``name=... shape=... dtype=f32 offset=...``) and ``<path>.blob`` holding
every array back to back as little-endian float32. Round-trips are
bit-exact for float32 inputs.
"""

from __future__ import annotations

import os

import numpy as np

MANIFEST_SUFFIX = ".manifest"
BLOB_SUFFIX = ".blob"


class CheckpointError(ValueError):
    pass


def save_arrays(path: str, arrays: dict[str, np.ndarray]) -> None:
    lines = []
    offset = 0
    blob_parts = []
    for name, arr in arrays.items():
        if "=" in name or any(ch.isspace() for ch in name):
            raise CheckpointError(f"invalid array name {name!r}")
        a = np.ascontiguousarray(arr, dtype="<f4")
        if a.ndim == 0:
            a = a.reshape(1)
        shape = ",".join(str(s) for s in a.shape)
        lines.append(f"name={name} shape={shape} dtype=f32 offset={offset}")
        blob_parts.append(a.tobytes())
        offset += a.nbytes
    with open(path + MANIFEST_SUFFIX, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    with open(path + BLOB_SUFFIX, "wb") as fh:
        fh.write(b"".join(blob_parts))


def load_arrays(path: str) -> dict[str, np.ndarray]:
    manifest = path + MANIFEST_SUFFIX
    blob = path + BLOB_SUFFIX
    if not os.path.exists(manifest):
        raise CheckpointError(f"missing manifest {manifest}")
    with open(blob, "rb") as fh:
        raw = fh.read()
    out: dict[str, np.ndarray] = {}
    with open(manifest, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            fields = dict(part.split("=", 1) for part in line.split())
            try:
                name = fields["name"]
                shape = tuple(int(s) for s in fields["shape"].split(","))
                offset = int(fields["offset"])
                dtype = fields["dtype"]
            except (KeyError, ValueError) as exc:
                raise CheckpointError(f"{manifest}:{lineno}: malformed entry: {exc}") from exc
            if dtype != "f32":
                raise CheckpointError(f"{manifest}:{lineno}: unsupported dtype {dtype!r}")
            count = int(np.prod(shape))
            end = offset + 4 * count
            if end > len(raw):
                raise CheckpointError(
                    f"{manifest}:{lineno}: blob too short for {name!r} "
                    f"(need {end} bytes, have {len(raw)})")
            out[name] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).copy()
    return out


def checkpoint_digest(path: str) -> str:
    """Hex digest of manifest + blob bytes, for determinism checks."""
    import hashlib

    h = hashlib.sha256()
    for suffix in (MANIFEST_SUFFIX, BLOB_SUFFIX):
        with open(path + suffix, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()
