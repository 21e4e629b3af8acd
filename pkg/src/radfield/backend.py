"""Kernel backend selection.

The package ships the hot kernels twice: a Cython extension
(``radfield._kernels``, built by ``setup.py build_ext``) and a pure-numpy
fallback (``radfield._kernels_py``). The compiled module is preferred when
importable; ``RADFIELD_KERNELS=python`` or ``=compiled`` forces the choice.
Both expose identical functions and are cross-checked in the test suite.
"""

import os

from . import _kernels_py

_FORCE = os.environ.get("RADFIELD_KERNELS", "").strip().lower()

_compiled = None
if _FORCE != "python":
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        _compiled = None
        if _FORCE == "compiled":
            raise ImportError(
                "RADFIELD_KERNELS=compiled but the extension is not built; "
                "run: python setup.py build_ext --inplace"
            )

kernels = _compiled if _compiled is not None else _kernels_py


def backend_name():
    """'compiled' when the Cython extension is active, else 'python'."""
    return "compiled" if kernels is not _kernels_py else "python"


def available_backends():
    """List of importable kernel modules, fallback first."""
    mods = [_kernels_py]
    if _compiled is not None:
        mods.append(_compiled)
    return mods
