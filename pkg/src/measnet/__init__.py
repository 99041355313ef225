"""All-in-one image restoration with per-pixel and global expert routing."""

import os as _os

# MEAS_THREADS caps BLAS/OpenMP pools; must be set before numpy loads.
_t = _os.environ.get("MEAS_THREADS", "")
if _t.isdigit() and int(_t) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _t)

from .autodiff import Tensor, grad_check, no_grad, finite_checks, NumericsError

__all__ = ["Tensor", "grad_check", "no_grad", "finite_checks", "NumericsError"]

__version__ = "0.1.0"
