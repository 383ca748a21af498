"""Kernel backend selection.

The hot numeric kernels (plane interpolation, gradient scatter, ray
compositing) exist twice: a numba @njit version and a pure-numpy
fallback with identical semantics. ``DEFIELD_BACKEND`` picks one:

    auto   use numba if importable, else numpy (default)
    numba  require numba, fail loudly if missing
    numpy  skip numba even when installed

Both paths perform the arithmetic in the same order and agree to at
worst a few ulp (exactly, for all non-transcendental kernels);
``benchmarks/kernel_bench.py`` compares their speed.
"""

import os

# prefer the omp layer; the image's TBB is too old and trips a warning
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

_VALID = ("auto", "numba", "numpy")


def requested_backend() -> str:
    value = os.environ.get("DEFIELD_BACKEND", "auto").strip().lower()
    if value not in _VALID:
        raise ValueError(
            f"DEFIELD_BACKEND={value!r} not understood; expected one of {_VALID}"
        )
    return value


def resolve_backend() -> str:
    """Return 'numba' or 'numpy' after honoring the env flag."""
    req = requested_backend()
    if req == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
        return "numba"
    except ImportError:
        if req == "numba":
            raise ImportError(
                "DEFIELD_BACKEND=numba but numba is not importable"
            ) from None
        return "numpy"


def set_num_threads(n: int) -> None:
    """Limit worker threads for the numba parallel kernels."""
    if resolve_backend() == "numba":
        import numba

        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
