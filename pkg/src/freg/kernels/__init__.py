"""Kernel backend selection.

The compiled extension is used when importable; setting ``FREG_BACKEND=numpy``
forces the pure-numpy fallback. ``backend.NAME`` reports which one is active.
"""

import os

from . import numpy_backend

if os.environ.get("FREG_BACKEND", "").lower() == "numpy":
    backend = numpy_backend
else:
    try:
        from . import _compiled as backend  # type: ignore[no-redef]
    except ImportError:
        backend = numpy_backend

conv3x3_forward = backend.conv3x3_forward
conv3x3_kernel_grad = backend.conv3x3_kernel_grad
affinity_apply = backend.affinity_apply
BACKEND_NAME: str = getattr(backend, "NAME", "compiled")
