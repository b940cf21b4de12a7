"""Test-session setup: pin BLAS to one thread before numpy loads.

The suite multiplies many tiny matrices; thread fan-out costs more than it
saves and single-threaded BLAS keeps timings stable across machines.
"""
import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
