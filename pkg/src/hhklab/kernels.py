"""Backend selection for the tree passes.

The compiled extension is used when it imports; otherwise the numpy
implementation is used. Setting ``HHKLAB_PURE_PYTHON=1`` forces the fallback.
"""

import os

if os.environ.get("HHKLAB_PURE_PYTHON", "") not in ("", "0"):
    from ._kernels_py import (backward_accumulate, forward_product, forward_satisfaction,
                              forward_sum, running_max)
    BACKEND = "python"
else:
    try:
        from ._kernels import (backward_accumulate, forward_product, forward_satisfaction,
                               forward_sum, running_max)
        BACKEND = "cython"
    except ImportError:
        from ._kernels_py import (backward_accumulate, forward_product, forward_satisfaction,
                                  forward_sum, running_max)
        BACKEND = "python"

__all__ = ["BACKEND", "backward_accumulate", "forward_product", "forward_satisfaction",
           "forward_sum", "running_max"]
