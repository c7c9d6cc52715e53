"""Prototype-based incremental few-shot segmentation at desk scale."""

import os

# Single-threaded BLAS keeps matmul results identical across worker layouts.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
