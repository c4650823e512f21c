"""Deterministic named-array file containers.

Datasets, body templates and training checkpoints are all stored in the
same container format: a plain (uncompressed) zip archive holding one
``<name>.npy`` entry per array plus a ``meta.json`` record. Entries are
written in sorted order with a fixed timestamp, so two writers producing
the same content emit byte-identical files. The ``.npy`` entries remain
readable with ``numpy.load`` for ad-hoc inspection.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

# Fixed zip timestamp (the zip epoch); real mtimes would break reproducibility.
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
_META_NAME = "meta.json"


class ContainerError(Exception):
    """Raised for unreadable, truncated or incompatible container files."""


def write_container(path, arrays: dict, meta: dict | None = None, kind: str = "arrays") -> None:
    """Write named arrays plus a metadata record to ``path``.

    Array names must be non-empty strings without the reserved ``meta.json``
    name. ``meta`` must be JSON-serializable.
    """
    meta = dict(meta or {})
    meta["format_version"] = FORMAT_VERSION
    meta["kind"] = kind
    for name in arrays:
        if not name or name == _META_NAME:
            raise ContainerError(f"invalid array name: {name!r}")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write_entry(zf, _META_NAME, json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]))
            _write_entry(zf, name + ".npy", buf.getvalue())


def read_container(path, kind: str | None = None) -> tuple[dict, dict]:
    """Read a container, returning ``(arrays, meta)``.

    Raises ContainerError on truncated files, format-version mismatch, or
    when ``kind`` is given and does not match the stored kind.
    """
    path = Path(path)
    if not path.exists():
        raise ContainerError(f"no such container file: {path}")
    try:
        with zipfile.ZipFile(path, "r") as zf:
            names = zf.namelist()
            if _META_NAME not in names:
                raise ContainerError(f"{path}: missing {_META_NAME} record")
            meta = json.loads(zf.read(_META_NAME))
            arrays = {}
            for name in names:
                if name == _META_NAME:
                    continue
                arrays[name.removesuffix(".npy")] = np.lib.format.read_array(
                    io.BytesIO(zf.read(name))
                )
    except zipfile.BadZipFile as exc:
        raise ContainerError(f"{path}: not a valid container ({exc})") from exc

    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise ContainerError(
            f"{path}: format version {version!r} not supported (expected {FORMAT_VERSION})"
        )
    if kind is not None and meta.get("kind") != kind:
        raise ContainerError(f"{path}: kind {meta.get('kind')!r}, expected {kind!r}")
    return arrays, meta


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)
