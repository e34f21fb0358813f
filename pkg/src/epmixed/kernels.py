"""Selects the likelihood-site kernel backend at import.

The compiled extension is used when it is importable; setting
``EPMIXED_BACKEND=python`` forces the pure-numpy fallback.
"""
from __future__ import annotations

import os

from . import _pykernels

MODEL_ZIP = _pykernels.MODEL_ZIP
MODEL_BINOMIAL = _pykernels.MODEL_BINOMIAL
N_SKIP = _pykernels.N_SKIP


def _load(name):
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def available():
    out = ["python"]
    try:
        _load("cython")
    except ImportError:
        pass
    else:
        out.insert(0, "cython")
    return out


def get(name=None):
    """Backend module by name; ``None`` means the import-time default."""
    return backend if name is None else _load(name)


_requested = os.environ.get("EPMIXED_BACKEND", "").strip().lower()
if _requested:
    backend = _load(_requested)
else:
    try:
        backend = _load("cython")
    except ImportError:
        backend = _pykernels

BACKEND = backend.NAME
