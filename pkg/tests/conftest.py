import os

# Pin BLAS pools before any test module pulls in numpy: the suites (and the
# stated runtime bounds) are single-core, and thread-pool sync is pure
# overhead at these array sizes.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
