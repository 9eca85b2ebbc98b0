import os

# Pin BLAS to one thread before numpy loads: this box exposes a single CPU,
# and a fixed thread count is part of the determinism contract.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
