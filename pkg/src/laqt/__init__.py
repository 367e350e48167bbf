"""Desk-scale cooperative MARL lab: level-adaptive transformer value mixing,
population-invariant agents, and a deterministic entity-combat simulator."""

import os

# The workloads here are many small dense ops; BLAS thread pools only add
# sync overhead (and runs are specified per single core). Must happen before
# numpy is first imported, so keep this above any submodule import.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
