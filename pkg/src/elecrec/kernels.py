"""Hot-kernel dispatch: the compiled extension when built, numpy otherwise.

Set ``ELECREC_PURE_PYTHON=1`` to force the numpy path.
"""

import os

from . import _fallback

BACKEND = "python"

if os.environ.get("ELECREC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _fallback
    else:
        BACKEND = "compiled"
else:
    _impl = _fallback

scatter_add_rows = _impl.scatter_add_rows
gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
softmax_xent = _impl.softmax_xent
softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
