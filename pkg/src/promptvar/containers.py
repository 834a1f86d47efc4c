"""Versioned flat containers of named float64 arrays.

One on-disk format backs both frozen-world weight files and learner
checkpoints: a zip archive (``numpy.savez``) holding the named arrays plus a
reserved ``__meta__`` entry with a JSON header.  The header always carries
``format_version`` so that readers can reject files written by an
incompatible writer, and a ``payload`` mapping with writer-specific fields.

Distinct error types let callers tell apart a damaged file from a valid file
of the wrong version.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_META_KEY = "__meta__"


class ContainerFormatError(Exception):
    """File is unreadable or structurally malformed."""


class ContainerVersionError(Exception):
    """File is well formed but written with an unsupported format version."""


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], payload: dict) -> None:
    """Write named arrays with a JSON header to ``path``.

    Arrays are stored as float64.  ``payload`` must be JSON serialisable;
    array names must not collide with the reserved header key.
    """
    path = Path(path)
    if _META_KEY in arrays:
        raise ValueError(f"array name {_META_KEY!r} is reserved")
    meta = {"format_version": FORMAT_VERSION, "payload": payload}
    stored = {name: np.asarray(a, dtype=np.float64) for name, a in arrays.items()}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **stored, **{_META_KEY: np.array(json.dumps(meta))})


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back as ``(arrays, payload)``.

    Raises ``ContainerFormatError`` for unreadable or headerless files and
    ``ContainerVersionError`` when the format version is unsupported.
    """
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            names = list(data.files)
            loaded = {name: data[name] for name in names}
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ContainerFormatError(f"{path}: not a readable array container ({exc})") from exc
    if _META_KEY not in loaded:
        raise ContainerFormatError(f"{path}: missing {_META_KEY} header entry")
    try:
        meta = json.loads(str(loaded.pop(_META_KEY)[()]))
    except Exception as exc:
        raise ContainerFormatError(f"{path}: unparseable header ({exc})") from exc
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise ContainerVersionError(
            f"{path}: format version {version!r} is not supported (expected {FORMAT_VERSION})"
        )
    arrays = {}
    for name, arr in loaded.items():
        if arr.dtype != np.float64:
            raise ContainerFormatError(f"{path}: array {name!r} is {arr.dtype}, expected float64")
        arrays[name] = arr
    return arrays, meta.get("payload", {})
