"""Mask-guided attention re-identification: training, evaluation, synthesis.

The high-level entry point is MmgaEmbedder, a scikit-learn style estimator;
the mmga command exposes the same pipeline for batch jobs.
"""

import os

# Honor the thread cap before numpy picks its BLAS pool size.  Must happen
# ahead of the first numpy import anywhere in the package.
_threads = os.environ.get("MMGA_THREADS")
if _threads:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(_var, _threads)

from .estimator import MmgaEmbedder, check_image_batch  # noqa: E402
from .tensor import Tensor  # noqa: E402

__all__ = ["MmgaEmbedder", "Tensor", "check_image_batch"]
__version__ = "0.1.0"
