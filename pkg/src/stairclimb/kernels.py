"""Hot kernels, compiled when the Cython extension is built, numpy otherwise.

Set ``STAIRCLIMB_PURE_PYTHON=1`` to force the numpy fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("STAIRCLIMB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

sample_heights = _impl.sample_heights
im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3
maxpool2x2 = _impl.maxpool2x2
maxpool2x2_backward = _impl.maxpool2x2_backward
conv3x3_maxpool = _impl.conv3x3_maxpool
conv3x3_maxpool_wgrad = _impl.conv3x3_maxpool_wgrad
elu = _impl.elu
elu_backward = _impl.elu_backward
