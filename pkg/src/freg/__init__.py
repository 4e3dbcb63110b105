"""freg: adversarial building-footprint regularization, self-contained.

A two-encoder / shared-decoder generative network trained with least-squares
adversarial, binary cross entropy, Potts, and normalized-cut losses on a
procedurally generated footprint corpus. Everything runs on the package's own
float32 autodiff engine; no ML framework required.
"""

from .kernels import BACKEND_NAME
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "BACKEND_NAME", "__version__"]
