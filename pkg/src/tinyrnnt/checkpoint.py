"""Self-describing JSON checkpoint container shared by the transducer model
and the token language models.

Layout (format_version 1):

    {
      "format_version": 1,
      "kind": "rnnt" | "token_lm",
      "vocab_symbols": [...],
      "meta": {...},                  # shape knobs, kind-specific
      "arrays": {"name": {"shape": [...], "data": [flat floats]}}
    }

Writes are atomic: the file is written to a temp path in the same directory
and renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np

from .errors import ContractError

FORMAT_VERSION = 1


def save_container(path, kind: str, vocab_symbols: list[str], meta: dict, arrays: dict) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "vocab_symbols": list(vocab_symbols),
        "meta": meta,
        "arrays": {
            name: {"shape": list(a.shape), "data": np.asarray(a, dtype=np.float64).reshape(-1).tolist()}
            for name, a in arrays.items()
        },
    }
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path, expect_kind: str | None = None) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format_version {version}")
    if expect_kind is not None and payload.get("kind") != expect_kind:
        raise ContractError(
            f"checkpoint kind {payload.get('kind')!r}, expected {expect_kind!r}"
        )
    payload["arrays"] = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["arrays"].items()
    }
    return payload


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
