"""Dense linear algebra, special functions, reproducible sampling, and L-BFGS.

Everything here is pure given (inputs, RngState): no module-level mutable
state, so all operations are safe to call concurrently.  All arithmetic is
64-bit; none of the routines downcast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InvalidInput

__all__ = [
    "SvdResult",
    "svd",
    "erf",
    "erf_inv",
    "RngState",
    "gaussian_sample",
    "LbfgsResult",
    "lbfgs_minimize",
    "pca_fit",
]


# ---------------------------------------------------------------------------
# SVD
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(s) @ vt`` with ``s`` sorted descending."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def svd(a: np.ndarray) -> SvdResult:
    """Thin singular value decomposition of a dense real matrix.

    Rank-deficient inputs yield trailing zero singular values; singular
    values are non-negative and non-increasing.  Raises InvalidInput on
    non-finite entries.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < 1:
        raise InvalidInput(f"svd expects a 2-d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput("svd input contains non-finite entries")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return SvdResult(u=u, s=s, vt=vt)


# ---------------------------------------------------------------------------
# Error function and its inverse
# ---------------------------------------------------------------------------

_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def _erf_series(x: float) -> float:
    # Maclaurin series, converges to double precision for |x| <= 3.
    acc = x
    term = x
    x2 = x * x
    for n in range(1, 120):
        term *= -x2 / n
        contrib = term / (2 * n + 1)
        acc += contrib
        if abs(contrib) < 1e-18 * abs(acc):
            break
    return _TWO_OVER_SQRT_PI * acc


def _erfc_cf(x: float) -> float:
    # Continued fraction for erfc, accurate for x >= 3:
    # erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + 1/2/(x + 2/2/(x + 3/2/(x + ...))))
    acc = 0.0
    for k in range(60, 0, -1):
        acc = (k / 2.0) / (x + acc)
    return math.exp(-x * x) / math.sqrt(math.pi) / (x + acc)


def erf(x: float) -> float:
    """Gauss error function, accurate to a few ulp over the real line."""
    x = float(x)
    if math.isnan(x):
        return math.nan
    sign = -1.0 if x < 0 else 1.0
    ax = abs(x)
    if ax <= 3.0:
        value = _erf_series(ax)
    elif ax >= 6.5:
        value = 1.0
    else:
        value = 1.0 - _erfc_cf(ax)
    return sign * value


def erf_inv(p: float) -> float:
    """Inverse error function on (-1, 1).

    Winitzki-style seed refined by Newton iterations on erf; the combination
    is accurate to ~1e-12 over [-0.999999, 0.999999].
    """
    p = float(p)
    if not -1.0 < p < 1.0:
        raise DomainError(f"erf_inv requires |p| < 1, got {p}")
    if p == 0.0:
        return 0.0
    sign = -1.0 if p < 0 else 1.0
    ap = abs(p)
    # Winitzki approximation seed.
    a = 0.147
    ln1mp2 = math.log1p(-ap * ap)
    h = 2.0 / (math.pi * a) + ln1mp2 / 2.0
    z = math.sqrt(math.sqrt(h * h - ln1mp2 / a) - h)
    # Newton: z <- z - (erf(z) - p) / erf'(z).
    for _ in range(4):
        err = erf(z) - ap
        z -= err / (_TWO_OVER_SQRT_PI * math.exp(-z * z))
    return sign * z


# ---------------------------------------------------------------------------
# Counter-based random streams
# ---------------------------------------------------------------------------


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


@dataclass
class RngState:
    """Counter-based random stream built on Philox.

    The pair (seed, counter) fully determines every draw, so identical states
    produce bit-identical sample streams on any platform, and parallel
    consumers can be handed disjoint streams via :meth:`split` without any
    shared mutable state.  Each drawing call consumes one counter value.
    """

    seed: int
    counter: int = 0

    def _generator(self) -> np.random.Generator:
        key = self.seed & 0xFFFFFFFFFFFFFFFF
        bitgen = np.random.Philox(counter=[0, 0, self.counter, 0], key=[key, 0])
        return np.random.Generator(bitgen)

    def _next(self) -> np.random.Generator:
        gen = self._generator()
        self.counter += 1
        return gen

    def normal(self, size=None) -> np.ndarray:
        return self._next().standard_normal(size=size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._next().uniform(low, high, size=size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._next().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._next().permutation(n)

    def split(self, tag) -> "RngState":
        """Derive an independent child stream.  Accepts an int or str tag."""
        if isinstance(tag, str):
            tag_int = 0
            for ch in tag.encode():
                tag_int = _splitmix64(tag_int ^ ch)
        else:
            tag_int = int(tag)
        child_seed = _splitmix64(_splitmix64(self.seed ^ 0xA5A5A5A5A5A5A5A5) ^ tag_int)
        return RngState(seed=child_seed, counter=0)

    def copy(self) -> "RngState":
        return RngState(seed=self.seed, counter=self.counter)


def gaussian_sample(rng: RngState, mean: np.ndarray, sigma: float, n: int) -> np.ndarray:
    """n i.i.d. draws from N(mean, sigma^2 I), one per row.

    sigma == 0 returns n exact copies of the mean.
    """
    mean = np.asarray(mean, dtype=np.float64).ravel()
    if sigma < 0:
        raise InvalidInput(f"sigma must be >= 0, got {sigma}")
    if not np.all(np.isfinite(mean)):
        raise InvalidInput("mean contains non-finite entries")
    if sigma == 0.0:
        return np.tile(mean, (n, 1))
    return mean[None, :] + sigma * rng.normal(size=(n, mean.size))


# ---------------------------------------------------------------------------
# L-BFGS with weak Wolfe line search
# ---------------------------------------------------------------------------


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    converged: bool
    n_iters: int
    line_search_failures: int
    trace: list = field(default_factory=list)  # (iteration, f, grad_norm)


def _wolfe_line_search(objective, x, f0, g0, d, c1=1e-4, c2=0.9, max_evals=40):
    """Weak Wolfe search along d; tries alpha=1 first.

    Returns (alpha, f, g, n_evals, ok).  Uses expand/bisect bracketing, which
    also behaves sensibly on piecewise-smooth objectives.
    """
    deriv0 = float(g0 @ d)
    if deriv0 >= 0:
        return 0.0, f0, g0, 0, False
    lo, hi = 0.0, math.inf
    alpha = 1.0
    f_new, g_new = f0, g0
    for n_eval in range(1, max_evals + 1):
        f_new, g_new = objective(x + alpha * d)
        if not math.isfinite(f_new) or f_new > f0 + c1 * alpha * deriv0:
            hi = alpha
        elif float(g_new @ d) < c2 * deriv0:
            lo = alpha
        else:
            return alpha, f_new, g_new, n_eval, True
        alpha = 0.5 * (lo + hi) if math.isfinite(hi) else 2.0 * lo
        if hi - lo < 1e-16 and math.isfinite(hi):
            break
    return alpha, f_new, g_new, max_evals, False


def lbfgs_minimize(
    objective,
    x0: np.ndarray,
    memory: int = 10,
    max_iters: int = 500,
    grad_tol: float = 1e-8,
) -> LbfgsResult:
    """Limited-memory quasi-Newton minimization.

    ``objective(x)`` must return ``(f, grad)`` with finite values at x0.
    Two-loop recursion with history ``memory``; the initial Hessian guess is
    rescaled each iteration by y.s/y.y.  Line search enforces the weak Wolfe
    conditions (sufficient decrease 1e-4 < 1/2, curvature 0.9).  A failed
    line search is recorded and the last iterate returned.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = objective(x)
    f = float(f)
    g = np.asarray(g, dtype=np.float64)
    if not (math.isfinite(f) and np.all(np.isfinite(g))):
        raise InvalidInput("objective is not finite at x0")

    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    failures = 0
    trace = [(0, f, float(np.linalg.norm(g)))]
    converged = False
    it = 0

    for it in range(1, max_iters + 1):
        if np.linalg.norm(g) <= grad_tol:
            converged = True
            break
        # Two-loop recursion.
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * float(s @ q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            gamma = float(s_hist[-1] @ y_hist[-1]) / float(y_hist[-1] @ y_hist[-1])
        else:
            gamma = 1.0
        r = gamma * q
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * float(y @ r)
            r += (a - b) * s
        d = -r

        step, f_new, g_new, _, ok = _wolfe_line_search(objective, x, f, g, d)
        if not ok or step == 0.0:
            failures += 1
            if step == 0.0 or not math.isfinite(f_new) or f_new >= f:
                break  # no usable progress; return last iterate
        s_vec = step * d
        y_vec = g_new - g
        x = x + s_vec
        f, g = float(f_new), g_new
        trace.append((it, f, float(np.linalg.norm(g))))
        sy = float(s_vec @ y_vec)
        if sy > 1e-10 * float(np.linalg.norm(s_vec)) * float(np.linalg.norm(y_vec)):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
    else:
        it = max_iters

    if np.linalg.norm(g) <= grad_tol:
        converged = True
    return LbfgsResult(
        x=x, f=f, converged=converged, n_iters=it,
        line_search_failures=failures, trace=trace,
    )


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


def pca_fit(x: np.ndarray, k: int) -> np.ndarray:
    """Top-k principal directions of the column-centered data, one per row.

    Rows are orthonormal right singular vectors; the induced projector
    P = W.T @ W is idempotent.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInput("pca_fit expects a 2-d data matrix")
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise InvalidInput(f"k={k} out of range for data {x.shape}")
    centered = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return vt[:k].copy()
