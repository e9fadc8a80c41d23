"""Hot loops behind the tensor core.

The compiled extension ``_fast`` is used when it was built; otherwise the numpy
versions in ``_pure`` are selected at import time. Setting the environment
variable ``LRNAS_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _pure

BACKEND = "python"
_impl = _pure

if os.environ.get("LRNAS_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _fast as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pure


def im2col(xp, kh, kw, sh, sw, oh, ow):
    # unit-stride gathers are memory bound and numpy's strided copy is as fast;
    # the compiled loop wins once the stride breaks contiguity
    if sh == 1 and sw == 1:
        return _pure.im2col(xp, kh, kw, sh, sw, oh, ow)
    return _impl.im2col(xp, kh, kw, sh, sw, oh, ow)


def col2im(cols, n_batch, chans, hp, wp, kh, kw, sh, sw, oh, ow):
    return _impl.col2im(cols, n_batch, chans, hp, wp, kh, kw, sh, sw, oh, ow)


def jacobi_rotate(at, vt, tol, max_sweeps):
    return _impl.jacobi_rotate(at, vt, tol, max_sweeps)


def implementations():
    """Map backend name -> kernel module for every backend importable here."""
    impls = {"python": _pure}
    try:
        from . import _fast

        impls["cython"] = _fast
    except ImportError:
        pass
    return impls
