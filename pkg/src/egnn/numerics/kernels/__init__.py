"""Hot kernels with a compiled backend and a NumPy fallback.

The compiled module is used when it was built and ``EGNN_PURE_PYTHON`` is
unset or "0". Both backends expose the same functions; ``BACKEND`` names the
active one.
"""

import os

from . import _numpy_kernels as numpy_backend

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

NAMES = (
    "conv3x3_forward",
    "conv3x3_backward",
    "pairwise_absdiff",
    "pairwise_absdiff_backward",
    "edge_renorm_forward",
    "edge_renorm_backward",
)


def _want_compiled() -> bool:
    return compiled_backend is not None and os.environ.get("EGNN_PURE_PYTHON", "0") in ("", "0")


def use_backend(name: str) -> None:
    """Switch the active backend to "compiled" or "numpy"."""
    global BACKEND
    if name == "compiled":
        if compiled_backend is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        module = compiled_backend
    elif name == "numpy":
        module = numpy_backend
    else:
        raise ValueError(f"unknown backend {name!r}")
    g = globals()
    for fn in NAMES:
        g[fn] = getattr(module, fn)
    BACKEND = name


BACKEND = "numpy"
use_backend("compiled" if _want_compiled() else "numpy")
