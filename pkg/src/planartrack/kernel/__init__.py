"""Kernel backend selection.

The compiled extension is preferred when importable; the pure-Python
reference is the fallback. PLANARTRACK_KERNEL=python|compiled forces one.
Both expose the same step_control and produce bit-identical trajectories.
"""

import os

from ..errors import DependencyError

_choice = os.environ.get("PLANARTRACK_KERNEL", "").strip().lower()

if _choice in ("", "compiled"):
    try:
        from . import _core as _impl
    except ImportError:
        if _choice == "compiled":
            raise DependencyError(
                "PLANARTRACK_KERNEL=compiled but the extension is not built; "
                "reinstall the package or unset the variable") from None
        from . import reference as _impl
elif _choice == "python":
    from . import reference as _impl
else:
    raise DependencyError(
        f"PLANARTRACK_KERNEL={_choice!r} not understood (python|compiled)")

BACKEND = _impl.BACKEND
step_control = _impl.step_control

STEP_OK = 0
STEP_DIVERGED = 1
STEP_SOLVER_FAILED = 2
STEP_BAD_MODEL = 3

MAX_LINKS = 16


def get_backend(name: str):
    """Load a specific backend module regardless of the import-time choice."""
    if name == "python":
        from . import reference
        return reference
    if name == "compiled":
        try:
            from . import _core
        except ImportError:
            raise DependencyError("compiled kernel is not built") from None
        return _core
    raise DependencyError(f"unknown kernel backend {name!r}")
