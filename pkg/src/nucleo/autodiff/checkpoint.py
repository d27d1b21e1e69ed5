"""Checkpoint container: a ``.npz`` archive of named parameter arrays.

Layout: ``param/<name>`` arrays, ``__version__`` (int) and ``__meta__`` (a
JSON string with run metadata). Loading checks every name and shape.
"""

from __future__ import annotations

import json
import os
from typing import Any

import numpy as np

from nucleo.autodiff.nn import Module

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, model: Module, meta: dict[str, Any] | None = None) -> None:
    arrays = {f"param/{name}": p.data for name, p in model.named_parameters()}
    arrays["__version__"] = np.asarray(FORMAT_VERSION)
    arrays["__meta__"] = np.asarray(json.dumps(meta or {}, sort_keys=True))
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def read_meta(path: str | os.PathLike) -> dict[str, Any]:
    with np.load(path, allow_pickle=False) as z:
        return json.loads(str(z["__meta__"]))


def load_checkpoint(path: str | os.PathLike, model: Module) -> dict[str, Any]:
    """Copy stored values into ``model`` and return the metadata.

    Raises:
        CheckpointError: on version mismatch, missing or unexpected names, or
            any shape mismatch (reported by parameter name).
    """
    with np.load(path, allow_pickle=False) as z:
        version = int(z["__version__"]) if "__version__" in z else None
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        stored = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        meta = json.loads(str(z["__meta__"]))
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise CheckpointError(f"{path}: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        if stored[name].shape != p.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: stored {stored[name].shape}, model {p.shape}"
            )
    for name, p in params.items():
        p.data = stored[name].astype(p.dtype)
        p.zero_grad()
        p.momentum_buf = np.zeros_like(p.data)
    return meta
