"""Desk-scale masked-diffusion LM with inpainting-guided policy optimization."""

import os as _os

# Pin BLAS threading before numpy loads: float64 reductions must not depend
# on thread count, or metrics files would stop being bit-reproducible.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
