"""Hot numerical kernels with a compiled core and a pure-numpy fallback.

The compiled extension (Cython) is preferred when importable; set
MODESAMPLER_PURE=1 to force the fallback.  Both backends implement the
same functions with identical semantics:

    gmm_logpdf, gmm_logpdf_grad      mixture-of-Gaussians density/gradient
    sensor_logpdf, sensor_logpdf_grad   pairwise range posterior
    active_wormhole                  nearest-wormhole selection

benchmarks/bench_kernels.py times one backend against the other.
"""

import os

from . import _pure

if os.environ.get("MODESAMPLER_PURE"):
    _backend = _pure
else:
    try:
        from . import _compiled as _backend  # type: ignore[no-redef]
    except ImportError:
        _backend = _pure

BACKEND = "pure" if _backend is _pure else "compiled"

gmm_logpdf = _backend.gmm_logpdf
gmm_logpdf_grad = _backend.gmm_logpdf_grad
sensor_logpdf = _backend.sensor_logpdf
sensor_logpdf_grad = _backend.sensor_logpdf_grad
active_wormhole = _backend.active_wormhole


def available_backends():
    """Importable backend modules keyed by name (for tests/benchmarks)."""
    out = {"pure": _pure}
    try:
        from . import _compiled
        out["compiled"] = _compiled
    except ImportError:
        pass
    return out
