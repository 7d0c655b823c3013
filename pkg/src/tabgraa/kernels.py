"""Backend selection for the tree-building kernel.

The compiled extension is used when importable; set
``TABGRAA_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _treekern_py

BACKEND = "python"
if os.environ.get("TABGRAA_PURE_PYTHON") != "1":
    try:
        from . import _treekern as _impl

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _treekern_py
else:
    _impl = _treekern_py

build_tree = _impl.build_tree
apply_tree = _impl.apply_tree


def get_backend(name=None):
    """Return the kernel module for ``name`` ("compiled" or "python")."""
    if name is None:
        return _impl
    if name == "python":
        return _treekern_py
    if name == "compiled":
        from . import _treekern

        return _treekern
    raise ValueError(f"unknown kernel backend {name!r}")
