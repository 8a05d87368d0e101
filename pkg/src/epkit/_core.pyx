# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twins of the hot MLP kernels.

Same arithmetic as epkit._mlp_np (flat parameter vector, ReLU hidden layers,
log-softmax head, batch-row convention); layer matmuls go through BLAS dgemm
and the elementwise stages are fused C loops.  epkit.backend prefers these
when the extension is importable.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

BACKEND_NAME = "compiled"


cdef void _gemm(double[:, ::1] a, double[:, ::1] b, double[:, ::1] out,
                bint trans_a, bint trans_b, double alpha, double beta) noexcept nogil:
    # out (m, n) = alpha * opA(a) @ opB(b) + beta * out, all row-major.
    # Fortran BLAS sees each C array transposed, so compute
    # out^T = opB(b)^T @ opA(a)^T with swapped operands.
    cdef int m, n, k, lda, ldb, ldc
    cdef char ta, tb
    if trans_a:
        m = a.shape[1]
        k = a.shape[0]
    else:
        m = a.shape[0]
        k = a.shape[1]
    if trans_b:
        n = b.shape[0]
    else:
        n = b.shape[1]
    ta = b'T' if trans_b else b'N'
    tb = b'T' if trans_a else b'N'
    lda = b.shape[1]
    ldb = a.shape[1]
    ldc = n
    dgemm(&ta, &tb, &n, &m, &k, &alpha,
          &b[0, 0], &lda, &a[0, 0], &ldb, &beta, &out[0, 0], &ldc)


cdef class _Workspace:
    """Per-spec scratch arrays reused across quadrature nodes."""

    cdef public list w_views      # (out, in) weight views into theta
    cdef public list b_offsets
    cdef public list zs           # pre-activations per layer (B, n_l)
    cdef public list hs           # layer inputs, hs[0] is X
    cdef public list ts           # tangent buffers per layer
    cdef public int n_layers

    def __init__(self, sizes, int batch):
        self.n_layers = len(sizes) - 1
        self.zs = [np.empty((batch, sizes[l + 1])) for l in range(self.n_layers)]
        self.ts = [np.empty((batch, sizes[l + 1])) for l in range(self.n_layers)]
        self.hs = [None] * (self.n_layers + 1)
        for l in range(1, self.n_layers):
            self.hs[l] = np.empty((batch, sizes[l]))


def _offsets(sizes):
    offs = []
    off = 0
    for l in range(len(sizes) - 1):
        w_off = off
        off += sizes[l + 1] * sizes[l]
        b_off = off
        off += sizes[l + 1]
        offs.append((w_off, b_off))
    return offs, off


cdef void _add_bias(double[:, ::1] z, double[::1] bias) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            z[i, j] += bias[j]


cdef void _relu_into(double[:, ::1] z, double[:, ::1] h) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            h[i, j] = z[i, j] if z[i, j] > 0.0 else 0.0


cdef void _log_softmax(double[:, ::1] z, double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double zmax, acc
    for i in range(z.shape[0]):
        zmax = z[i, 0]
        for j in range(1, z.shape[1]):
            if z[i, j] > zmax:
                zmax = z[i, j]
        acc = 0.0
        for j in range(z.shape[1]):
            acc += exp(z[i, j] - zmax)
        acc = log(acc) + zmax
        for j in range(z.shape[1]):
            out[i, j] = z[i, j] - acc


cdef void _forward_pass(double[::1] theta, sizes, offs,
                        double[:, ::1] X, _Workspace ws):
    """Fill ws.zs / ws.hs; hs[0] is bound to X."""
    cdef int l, n_layers = len(sizes) - 1
    cdef double[:, ::1] h = X
    ws.hs[0] = X.base if isinstance(X, np.ndarray) else X
    theta_np = np.asarray(theta.base if hasattr(theta, "base") else theta)
    for l in range(n_layers):
        w_off, b_off = offs[l]
        w = np.frombuffer(theta_np, dtype=np.float64,
                          count=sizes[l + 1] * sizes[l],
                          offset=w_off * 8).reshape(sizes[l + 1], sizes[l])
        _gemm(h, w, ws.zs[l], False, True, 1.0, 0.0)
        _add_bias(ws.zs[l], theta[b_off:b_off + sizes[l + 1]])
        if l < n_layers - 1:
            _relu_into(ws.zs[l], ws.hs[l + 1])
            h = ws.hs[l + 1]


def forward(theta, sizes, X):
    """Log-probabilities (B, K) for a batch; mirrors the numpy kernel."""
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    sizes = tuple(int(s) for s in sizes)
    cdef int n_out = sizes[len(sizes) - 1]
    offs, total = _offsets(sizes)
    ws = _Workspace(sizes, X.shape[0])
    _forward_pass(theta, sizes, offs, X, ws)
    out = np.empty((X.shape[0], n_out))
    _log_softmax(ws.zs[len(sizes) - 2], out)
    return out


def weighted_grad_sum(theta, sizes, X, C):
    """Batch-summed gradient of sum_b <C[b], logp(x_b)> plus logp."""
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    C = np.ascontiguousarray(np.atleast_2d(C), dtype=np.float64)
    sizes = tuple(int(s) for s in sizes)
    cdef int n_out = sizes[len(sizes) - 1]
    cdef int n_layers = len(sizes) - 1
    cdef Py_ssize_t B = X.shape[0], K = sizes[len(sizes) - 1]
    offs, total = _offsets(sizes)
    ws = _Workspace(sizes, B)
    _forward_pass(theta, sizes, offs, X, ws)
    logp = np.empty((B, K))
    _log_softmax(ws.zs[n_layers - 1], logp)

    grad = np.zeros(total)
    cdef double[:, ::1] logp_v = logp
    cdef double[:, ::1] c_v = C
    delta = np.empty((B, K))
    cdef double[:, ::1] d_v = delta
    cdef Py_ssize_t i, j
    cdef double csum
    # delta_L = C - softmax * rowsum(C)
    for i in range(B):
        csum = 0.0
        for j in range(K):
            csum += c_v[i, j]
        for j in range(K):
            d_v[i, j] = c_v[i, j] - exp(logp_v[i, j]) * csum

    cdef int l
    theta_np = np.asarray(theta)
    for l in range(n_layers - 1, -1, -1):
        w_off, b_off = offs[l]
        h = ws.hs[l] if l > 0 else np.asarray(X)
        gw = grad[w_off:w_off + sizes[l + 1] * sizes[l]] \
            .reshape(sizes[l + 1], sizes[l])
        _gemm(delta, h, gw, True, False, 1.0, 0.0)
        grad[b_off:b_off + sizes[l + 1]] = delta.sum(axis=0)
        if l > 0:
            w = theta_np[w_off:w_off + sizes[l + 1] * sizes[l]] \
                .reshape(sizes[l + 1], sizes[l])
            new_delta = np.empty((B, sizes[l]))
            _gemm(delta, np.ascontiguousarray(w), new_delta,
                  False, False, 1.0, 0.0)
            _mask_inplace(new_delta, ws.zs[l - 1])
            delta = new_delta
            d_v = delta
    return grad, logp


cdef void _mask_inplace(double[:, ::1] arr, double[:, ::1] z) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(arr.shape[0]):
        for j in range(arr.shape[1]):
            if z[i, j] <= 0.0:
                arr[i, j] = 0.0


cdef void _jvp_accumulate(double[::1] theta, double[::1] v, sizes, offs,
                          double[:, ::1] X, _Workspace ws,
                          double[:, ::1] out, double weight):
    """out += weight * d/dr logp(X; theta + r v); forward+tangent fused."""
    cdef int l, n_layers = len(sizes) - 1
    cdef Py_ssize_t B = X.shape[0], K = sizes[len(sizes) - 1]
    cdef double[:, ::1] h = X
    theta_np = np.asarray(theta)
    v_np = np.asarray(v)
    cdef Py_ssize_t i, j
    cdef double acc, p
    tangent_prev = None
    for l in range(n_layers):
        w_off, b_off = offs[l]
        w = np.ascontiguousarray(
            theta_np[w_off:w_off + sizes[l + 1] * sizes[l]]
            .reshape(sizes[l + 1], sizes[l]))
        vw = np.ascontiguousarray(
            v_np[w_off:w_off + sizes[l + 1] * sizes[l]]
            .reshape(sizes[l + 1], sizes[l]))
        _gemm(h, w, ws.zs[l], False, True, 1.0, 0.0)
        _add_bias(ws.zs[l], theta[b_off:b_off + sizes[l + 1]])
        _gemm(h, vw, ws.ts[l], False, True, 1.0, 0.0)
        _add_bias(ws.ts[l], v[b_off:b_off + sizes[l + 1]])
        if tangent_prev is not None:
            _gemm(tangent_prev, w, ws.ts[l], False, True, 1.0, 1.0)
        if l < n_layers - 1:
            _relu_into(ws.zs[l], ws.hs[l + 1])
            _mask_inplace(ws.ts[l], ws.zs[l])
            h = ws.hs[l + 1]
            tangent_prev = ws.ts[l]
    # tangent of log-softmax: tz - sum_j p_j tz_j
    cdef double[:, ::1] z = ws.zs[n_layers - 1]
    cdef double[:, ::1] tz = ws.ts[n_layers - 1]
    cdef double zmax, lse
    for i in range(B):
        zmax = z[i, 0]
        for j in range(1, K):
            if z[i, j] > zmax:
                zmax = z[i, j]
        lse = 0.0
        for j in range(K):
            lse += exp(z[i, j] - zmax)
        acc = 0.0
        for j in range(K):
            p = exp(z[i, j] - zmax) / lse
            acc += p * tz[i, j]
        for j in range(K):
            out[i, j] += weight * (tz[i, j] - acc)


def jvp(theta, sizes, X, v):
    """Directional derivative of logp along parameter direction v; (B, K)."""
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    sizes = tuple(int(s) for s in sizes)
    cdef int n_out = sizes[len(sizes) - 1]
    offs, _ = _offsets(sizes)
    ws = _Workspace(sizes, X.shape[0])
    out = np.zeros((X.shape[0], n_out))
    _jvp_accumulate(theta, v, sizes, offs, X, ws, out, 1.0)
    return out


def epk_step_adjust(theta0, theta1, sizes, X, nodes, weights):
    """Quadrature sum of JVPs along one training segment; (B, K).

    The interpolated parameter vector is rebuilt in C per node and the
    forward/tangent passes run fused, so the whole inner loop of the
    path-kernel prediction stays inside the extension.
    """
    theta0 = np.ascontiguousarray(theta0, dtype=np.float64)
    theta1 = np.ascontiguousarray(theta1, dtype=np.float64)
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    sizes = tuple(int(s) for s in sizes)
    cdef int n_out = sizes[len(sizes) - 1]
    offs, total = _offsets(sizes)
    ws = _Workspace(sizes, X.shape[0])
    out = np.zeros((X.shape[0], n_out))
    delta = theta1 - theta0
    theta_t = np.empty(total)
    cdef double[::1] t0_v = theta0
    cdef double[::1] d_v = delta
    cdef double[::1] tt_v = theta_t
    cdef Py_ssize_t j
    cdef double t
    nodes = np.asarray(nodes, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    for idx in range(nodes.shape[0]):
        t = nodes[idx]
        for j in range(total):
            tt_v[j] = t0_v[j] + t * d_v[j]
        _jvp_accumulate(theta_t, delta, sizes, offs, X, ws, out,
                        weights[idx])
    return out
