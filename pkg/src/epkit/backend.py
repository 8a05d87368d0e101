"""Kernel backend selection: compiled extension core with numpy fallback.

The Cython extension ``epkit._core`` implements the hottest kernels (batched
forward pass, batch-summed gradients, parameter-direction JVPs, and the
path-step quadrature loop).  If it is missing or EPKIT_BACKEND=numpy is set,
the pure-numpy twins from ``epkit._mlp_np`` serve instead.  Both backends
implement identical arithmetic; ``tests/test_backend.py`` pins their parity.
"""

from __future__ import annotations

import os

from . import _mlp_np as _np_impl

# Kernels that exist only in numpy form.
layer_shapes = _np_impl.layer_shapes
n_params = _np_impl.n_params
unpack = _np_impl.unpack
pack = _np_impl.pack
forward_full = _np_impl.forward_full
weighted_param_grads = _np_impl.weighted_param_grads
class_jacobians = _np_impl.class_jacobians
grad_dots = _np_impl.grad_dots
input_grads = _np_impl.input_grads
mixed_grad_x = _np_impl.mixed_grad_x
mixed_grad_theta = _np_impl.mixed_grad_theta

_BACKEND_NAME = "numpy"
forward = _np_impl.forward
weighted_grad_sum = _np_impl.weighted_grad_sum
jvp = _np_impl.jvp
epk_step_adjust = _np_impl.epk_step_adjust

if os.environ.get("EPKIT_BACKEND", "").lower() not in ("numpy", "python"):
    try:
        from . import _core as _compiled

        forward = _compiled.forward
        weighted_grad_sum = _compiled.weighted_grad_sum
        jvp = _compiled.jvp
        epk_step_adjust = _compiled.epk_step_adjust
        _BACKEND_NAME = "compiled"
    except ImportError:
        pass


def backend_name() -> str:
    """Which implementation is serving the hot kernels."""
    return _BACKEND_NAME


def numpy_kernels():
    """The pure-numpy kernel module (always available; used by benchmarks)."""
    return _np_impl


def compiled_kernels():
    """The compiled kernel module, or None if the extension is not built."""
    try:
        from . import _core as _compiled
        return _compiled
    except ImportError:
        return None
