import os
from dotenv import load_dotenv

# Load .env from project root (same folder as main.py)
load_dotenv()

LOG_LEVEL = os.getenv("CGEGNN_LOG_LEVEL", "INFO").upper()

# Global seed fallback when a command gets no --seed
SEED = int(os.getenv("CGEGNN_SEED", "0"))

THREADS = int(os.getenv("CGEGNN_THREADS", "1"))

# High-order messages grow combinatorially with the neighborhood size.
MAX_SUBSETS_PER_NODE = int(os.getenv("CGEGNN_MAX_SUBSETS_PER_NODE", "10000"))

# Property-suite defaults (check command)
CHECK_TRIALS = int(os.getenv("CGEGNN_CHECK_TRIALS", "100"))
CHECK_EQUIVARIANCE_TOL = float(os.getenv("CGEGNN_CHECK_EQUIVARIANCE_TOL", "1e-6"))
CHECK_GRAD_TOL = float(os.getenv("CGEGNN_CHECK_GRAD_TOL", "1e-4"))
