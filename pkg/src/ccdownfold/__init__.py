"""Coupled-cluster downfolding toolkit."""
import os

__version__ = "0.1.0"

# thread count for the BLAS back end; must be set before numpy loads
_threads = os.environ.get("CCDOWNFOLD_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
