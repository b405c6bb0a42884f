"""Multi-source class-asymmetric domain adaptation for segmentation, desk scale."""

import os

# MSCADA_THREADS pins the BLAS worker count for bitwise-reproducible runs.
# Must happen before numpy loads its BLAS backend, hence here at package root.
_threads = os.environ.get("MSCADA_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from mscada.tensor import IGNORE_LABEL, Tensor, no_grad  # noqa: E402

__version__ = "0.1.0"

__all__ = ["IGNORE_LABEL", "Tensor", "no_grad", "__version__"]
