"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy fallback in ``_kernels_py``. Set ``DATADROP_BACKEND=python`` to force
the fallback (``cython`` to require the extension).
"""
from __future__ import annotations

import contextlib
import os
from types import ModuleType

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS: dict[str, ModuleType | None] = {"cython": _compiled, "python": _kernels_py}


def _select(name: str) -> ModuleType:
    if name == "auto":
        return _compiled if _compiled is not None else _kernels_py
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected auto, cython or python")
    mod = _BACKENDS[name]
    if mod is None:
        raise ImportError("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    return mod


kernels: ModuleType = _select(os.environ.get("DATADROP_BACKEND", "auto"))


def name() -> str:
    return "cython" if kernels is _compiled else "python"


def available() -> list[str]:
    return [k for k, v in _BACKENDS.items() if v is not None]


def set_backend(backend: str) -> None:
    global kernels
    kernels = _select(backend)


@contextlib.contextmanager
def use_backend(backend: str):
    """Temporarily switch kernels, e.g. for parity tests and benchmarks."""
    global kernels
    previous = kernels
    kernels = _select(backend)
    try:
        yield kernels
    finally:
        kernels = previous
