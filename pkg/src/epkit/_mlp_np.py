"""Pure-numpy kernels for fully connected ReLU networks with log-softmax heads.

These are the hot inner routines shared by training, attacks, geometry and the
path-kernel machinery.  A compiled twin of the most frequently called subset
lives in ``epkit._core``; ``epkit.backend`` picks whichever is available.

Conventions
-----------
Parameters are a single flat float64 vector ``theta``; ``sizes`` is the layer
width tuple (input, hidden..., output).  Layer l maps width ``sizes[l]`` to
``sizes[l+1]`` via ``z = h @ W_l.T + b_l`` with ``W_l`` of shape
(out, in) and ``b_l`` of shape (out,).  Hidden activations are ReLU with
derivative 0 at 0; the head is log-softmax.  Batches are row-major (B, d).
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


def layer_shapes(sizes):
    return [((sizes[l + 1], sizes[l]), (sizes[l + 1],)) for l in range(len(sizes) - 1)]


def n_params(sizes) -> int:
    return sum(sizes[l] * sizes[l + 1] + sizes[l + 1] for l in range(len(sizes) - 1))


def unpack(theta, sizes):
    """View the flat parameter vector as [(W_0, b_0), ...] without copying."""
    out = []
    off = 0
    for (wshape, bshape) in layer_shapes(sizes):
        wn = wshape[0] * wshape[1]
        w = theta[off:off + wn].reshape(wshape)
        off += wn
        b = theta[off:off + bshape[0]]
        off += bshape[0]
        out.append((w, b))
    return out


def pack(layers, sizes):
    theta = np.empty(n_params(sizes), dtype=np.float64)
    off = 0
    for w, b in layers:
        wn = w.size
        theta[off:off + wn] = np.asarray(w, dtype=np.float64).ravel()
        off += wn
        theta[off:off + b.size] = np.asarray(b, dtype=np.float64).ravel()
        off += b.size
    return theta


def _log_softmax(z):
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def forward_full(theta, sizes, X):
    """Forward pass keeping intermediates.

    Returns (zs, hs, logp): pre-activations per layer, inputs to each layer
    (hs[0] is X), and log-probabilities (B, K).
    """
    layers = unpack(theta, sizes)
    h = np.asarray(X, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
    hs = [h]
    zs = []
    n_layers = len(layers)
    for l, (w, b) in enumerate(layers):
        z = h @ w.T + b
        zs.append(z)
        if l < n_layers - 1:
            h = np.maximum(z, 0.0)
            hs.append(h)
    return zs, hs, _log_softmax(zs[-1])


def forward(theta, sizes, X):
    """Log-probabilities (B, K) for a batch."""
    return forward_full(theta, sizes, X)[2]


def _softmax_from_z(z):
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    return e / e.sum(axis=1, keepdims=True)


def weighted_param_grads(theta, sizes, X, C):
    """Per-sample parameter gradients of psi_b = <C[b], logp(x_b)>.

    Returns (B, M).  With C = -Y this is the per-sample cross-entropy loss
    gradient.  Materializes the per-sample outer products; use
    ``weighted_grad_sum`` when only the batch total is needed.
    """
    zs, hs, _ = forward_full(theta, sizes, X)
    B = hs[0].shape[0]
    p = _softmax_from_z(zs[-1])
    C = np.asarray(C, dtype=np.float64)
    delta = C - p * C.sum(axis=1, keepdims=True)
    layers = unpack(theta, sizes)
    n_layers = len(layers)
    deltas = [None] * n_layers
    deltas[-1] = delta
    for l in range(n_layers - 1, 0, -1):
        w, _ = layers[l]
        delta = (delta @ w) * (zs[l - 1] > 0.0)
        deltas[l - 1] = delta
    out = np.empty((B, n_params(sizes)), dtype=np.float64)
    off = 0
    for l, (w, b) in enumerate(layers):
        wn = w.size
        np.einsum("bi,bj->bij", deltas[l], hs[l], out=out[:, off:off + wn].reshape(B, *w.shape))
        off += wn
        out[:, off:off + b.size] = deltas[l]
        off += b.size
    return out


def weighted_grad_sum(theta, sizes, X, C):
    """Batch-summed parameter gradient of sum_b <C[b], logp(x_b)>.

    Returns (grad (M,), logp (B, K)).  The logp output lets callers derive
    per-sample losses without a second forward pass.
    """
    zs, hs, logp = forward_full(theta, sizes, X)
    p = _softmax_from_z(zs[-1])
    C = np.asarray(C, dtype=np.float64)
    delta = C - p * C.sum(axis=1, keepdims=True)
    layers = unpack(theta, sizes)
    n_layers = len(layers)
    grad = np.empty(n_params(sizes), dtype=np.float64)
    # Walk backward, writing each layer's slice as soon as its delta is known.
    offsets = []
    off = 0
    for (wshape, bshape) in layer_shapes(sizes):
        offsets.append((off, off + wshape[0] * wshape[1]))
        off += wshape[0] * wshape[1] + bshape[0]
    for l in range(n_layers - 1, -1, -1):
        w, b = layers[l]
        w_lo, w_hi = offsets[l]
        grad[w_lo:w_hi] = (delta.T @ hs[l]).ravel()
        grad[w_hi:w_hi + b.size] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ w) * (zs[l - 1] > 0.0)
    return grad, logp


def class_jacobians(theta, sizes, X):
    """Full per-class parameter Jacobians, shape (B, K, M).

    Row (b, k) is the gradient of log-probability k at x_b with respect to
    theta.  Each input is replicated K times with unit class seeds so a
    single reverse pass covers every class; intended for modest batch sizes.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    B = X.shape[0]
    K = sizes[-1]
    X_rep = np.repeat(X, K, axis=0)
    C = np.tile(np.eye(K), (B, 1))
    rows = weighted_param_grads(theta, sizes, X_rep, C)
    return rows.reshape(B, K, n_params(sizes))


def jvp(theta, sizes, X, v):
    """Directional derivative of logp along the parameter direction v.

    Forward-mode pass; returns (B, K) = d/dr logp(x; theta + r v) at r=0.
    """
    layers = unpack(theta, sizes)
    tangents = unpack(np.asarray(v, dtype=np.float64), sizes)
    h = np.asarray(X, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
    th = np.zeros_like(h)
    n_layers = len(layers)
    for l, ((w, b), (vw, vb)) in enumerate(zip(layers, tangents)):
        z = h @ w.T + b
        tz = th @ w.T + h @ vw.T + vb
        if l < n_layers - 1:
            mask = z > 0.0
            h = z * mask
            th = tz * mask
    p = _softmax_from_z(z)
    return tz - (p * tz).sum(axis=1, keepdims=True)


def grad_dots(theta, sizes, X, C, directions):
    """Inner products of per-sample gradients with parameter directions.

    Returns (B, R) with entry (b, r) = <grad_theta psi_b, directions[r]>
    where psi_b = <C[b], logp(x_b)>.  Evaluated as directional derivatives
    (one tangent pass per direction), so no per-sample gradient matrix is
    ever materialized.
    """
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    C = np.asarray(C, dtype=np.float64)
    out = np.empty((C.shape[0], directions.shape[0]), dtype=np.float64)
    for r in range(directions.shape[0]):
        tangents = jvp(theta, sizes, X, directions[r])
        out[:, r] = (C * tangents).sum(axis=1)
    return out


def input_grads(theta, sizes, X, C):
    """Per-sample input gradients of psi_b = <C[b], logp(x_b)>; shape (B, d)."""
    zs, _, _ = forward_full(theta, sizes, X)
    p = _softmax_from_z(zs[-1])
    C = np.asarray(C, dtype=np.float64)
    delta = C - p * C.sum(axis=1, keepdims=True)
    layers = unpack(theta, sizes)
    for l in range(len(layers) - 1, 0, -1):
        w, _ = layers[l]
        delta = (delta @ w) * (zs[l - 1] > 0.0)
    return delta @ layers[0][0]


def mixed_grad_x(theta, sizes, X, C, a):
    """Input gradient of the parameter-space inner product <a, grad_theta psi_b>.

    psi_b = <C[b], logp(x_b)>.  Returns (B, d) where row b is
    d/dx_b of <a, grad_theta psi_b>.  Exact (reverse-over-reverse) up to the
    measure-zero ReLU kink set, where masks are treated as locally constant.
    """
    zs, hs, _ = forward_full(theta, sizes, X)
    p = _softmax_from_z(zs[-1])
    C = np.asarray(C, dtype=np.float64)
    csum = C.sum(axis=1, keepdims=True)
    layers = unpack(theta, sizes)
    A = unpack(np.asarray(a, dtype=np.float64), sizes)
    n_layers = len(layers)

    deltas = [None] * n_layers
    delta = C - p * csum
    deltas[-1] = delta
    for l in range(n_layers - 1, 0, -1):
        w, _ = layers[l]
        delta = (delta @ w) * (zs[l - 1] > 0.0)
        deltas[l - 1] = delta

    # Sensitivity of sum_l <delta_l, u_l> to each delta_l, pushed up the
    # delta recursion: v_{l+1} = u_{l+1} + (v_l * mask_l) @ W_{l+1}.T.
    u = [hs[l] @ A[l][0].T + A[l][1] for l in range(n_layers)]
    v = u[0]
    for l in range(1, n_layers):
        w, _ = layers[l]
        v = u[l] + (v * (zs[l - 1] > 0.0)) @ w.T

    # Seed at z_L through the softmax-dependent delta_L.
    pv = (p * v).sum(axis=1, keepdims=True)
    g_z = -csum * (p * v - p * pv)

    # Single reverse sweep adding the direct dependence of u_l on h_{l-1}.
    for l in range(n_layers - 1, 0, -1):
        w, _ = layers[l]
        g_h = g_z @ w + deltas[l] @ A[l][0]
        g_z = g_h * (zs[l - 1] > 0.0)
    return g_z @ layers[0][0] + deltas[0] @ A[0][0]


def mixed_grad_theta(theta, sizes, X, C, U):
    """Parameter gradient of sum_b <U[b], grad_x psi_b>; shape (M,).

    psi_b = <C[b], logp(x_b)>, U is (B, d) of constant input-space vectors.
    Same reverse-over-reverse construction as mixed_grad_x, transposed.
    """
    zs, hs, _ = forward_full(theta, sizes, X)
    p = _softmax_from_z(zs[-1])
    C = np.asarray(C, dtype=np.float64)
    csum = C.sum(axis=1, keepdims=True)
    layers = unpack(theta, sizes)
    U = np.asarray(U, dtype=np.float64)
    n_layers = len(layers)

    deltas = [None] * n_layers
    delta = C - p * csum
    deltas[-1] = delta
    for l in range(n_layers - 1, 0, -1):
        w, _ = layers[l]
        delta = (delta @ w) * (zs[l - 1] > 0.0)
        deltas[l - 1] = delta

    grad = np.zeros(n_params(sizes), dtype=np.float64)
    offsets = []
    off = 0
    for (wshape, bshape) in layer_shapes(sizes):
        offsets.append((off, off + wshape[0] * wshape[1]))
        off += wshape[0] * wshape[1] + bshape[0]

    # h = sum_b delta_1^b . (W_1 u_b): direct W_1 term, then the v-recursion
    # contributes delta_{l+1} (mask_l * v_l)^T to each W_{l+1}.
    v = U @ layers[0][0].T
    w_lo, w_hi = offsets[0]
    grad[w_lo:w_hi] += (deltas[0].T @ U).ravel()
    masked = [None] * n_layers
    for l in range(1, n_layers):
        w, _ = layers[l]
        mv = v * (zs[l - 1] > 0.0)
        masked[l] = mv
        w_lo, w_hi = offsets[l]
        grad[w_lo:w_hi] += (deltas[l].T @ mv).ravel()
        v = mv @ w.T

    # Seed at z_L, then the standard reverse sweep for the z-path terms.
    pv = (p * v).sum(axis=1, keepdims=True)
    g_z = -csum * (p * v - p * pv)
    for l in range(n_layers - 1, -1, -1):
        w, b = layers[l]
        w_lo, w_hi = offsets[l]
        grad[w_lo:w_hi] += (g_z.T @ hs[l]).ravel()
        grad[w_hi:w_hi + b.size] += g_z.sum(axis=0)
        if l > 0:
            g_z = (g_z @ w) * (zs[l - 1] > 0.0)
    return grad


def epk_step_adjust(theta0, theta1, sizes, X, nodes, weights):
    """Quadrature of the test-side gradient field against one training step.

    Accumulates sum_t w_t * d/dr logp(x; theta(t) + r (theta1 - theta0)) for
    theta(t) on the segment [theta0, theta1]; returns (B, K).  This is the
    inner loop of the path-kernel prediction.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    delta = np.asarray(theta1, dtype=np.float64) - theta0
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    out = np.zeros((X.shape[0], sizes[-1]), dtype=np.float64)
    for t, w in zip(nodes, weights):
        theta_t = theta0 + t * delta
        out += w * jvp(theta_t, sizes, X, delta)
    return out
