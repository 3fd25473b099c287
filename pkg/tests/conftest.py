"""Pin BLAS pools to one thread before numpy loads anywhere in the suite.

The end-to-end training test carries a single-threaded wall-clock budget,
and the tiny matrices used everywhere else gain nothing from threading.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
