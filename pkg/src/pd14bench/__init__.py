"""Energy-to-solution and real-time benchmark harness for the cortical microcircuit model."""
import os as _os

# the bundled TBB is too old for numba; pick the portable layer up front
_os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
