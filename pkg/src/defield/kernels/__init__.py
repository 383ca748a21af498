"""Hot-loop kernels with selectable backend (numba @njit or pure numpy).

``DEFIELD_BACKEND=numpy`` forces the fallback; see ``defield.backend``.
"""

from defield.backend import resolve_backend

BACKEND = resolve_backend()

if BACKEND == "numba":
    from defield.kernels import numba_impl as _impl
else:
    from defield.kernels import numpy_impl as _impl

splitmix64 = _impl.splitmix64
uniform01 = _impl.uniform01
bilerp_gather = _impl.bilerp_gather
bilerp_backward = _impl.bilerp_backward
planes_gather = _impl.planes_gather
planes_backward = _impl.planes_backward
composite_forward = _impl.composite_forward
composite_backward = _impl.composite_backward


def get_impl(name):
    """Fetch a backend module by name ('numpy' or 'numba'); for tests/bench."""
    if name == "numpy":
        from defield.kernels import numpy_impl
        return numpy_impl
    if name == "numba":
        from defield.kernels import numba_impl
        return numba_impl
    raise ValueError(f"unknown backend {name!r}")
