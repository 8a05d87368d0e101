"""Stability and persistence measurement plus decision-boundary geometry.

A classifier here is any object with ``labels(X) -> (B,) int array``; model
classifiers additionally expose ``log_probs(X)`` whose pairwise differences
equal logit differences exactly (the log-softmax shift cancels), which the
boundary bisection relies on.  Monte-Carlo estimates draw through RngState,
so every routine is deterministic under a fixed seed regardless of how work
is scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .data import WedgeSpec, wedge_classify_batch
from .errors import InvalidInput
from .model import ModelSpec
from .numerics import RngState, erf_inv, gaussian_sample, svd

__all__ = [
    "ModelClassifier",
    "WedgeClassifier",
    "StabilityEstimate",
    "PersistenceResult",
    "BoundaryCrossing",
    "NormalEstimate",
    "stability",
    "persistence_bracket",
    "wedge_persistence_oracle",
    "persistence_curve",
    "boundary_bisect",
    "boundary_normal",
    "crossing_angles",
    "stability_grid",
    "UNBOUNDED",
]

UNBOUNDED = math.inf


class ModelClassifier:
    """Read-only classifier view of a trained network."""

    def __init__(self, spec: ModelSpec, theta: np.ndarray):
        self.spec = spec
        self.theta = np.asarray(theta, dtype=np.float64)

    def log_probs(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return backend.forward(self.theta, self.spec.layer_sizes, X)

    def labels(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.log_probs(X), axis=1)


class WedgeClassifier:
    """Analytic wedge-membership classifier (labels 1 inside, 0 outside)."""

    def __init__(self, spec: WedgeSpec):
        self.spec = spec

    def labels(self, X: np.ndarray) -> np.ndarray:
        return wedge_classify_batch(self.spec, X)


@dataclass
class StabilityEstimate:
    gamma_hat: float
    n_samples: int
    sigma: float
    reference_class: int


@dataclass
class PersistenceResult:
    gamma: float
    sigma_star: float           # UNBOUNDED when stability never drops to gamma
    converged: bool
    trace: list = field(default_factory=list)  # (sigma, gamma_hat) pairs

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.sigma_star)


@dataclass
class BoundaryCrossing:
    x_boundary: np.ndarray
    class_pair: tuple
    logit_gap: float
    t: float
    third_class: bool           # tie involves a class other than the endpoints'


@dataclass
class NormalEstimate:
    normal: np.ndarray
    singular_values: np.ndarray
    low_confidence: bool
    n_used: int


def stability(classifier, x, sigma: float, n: int, rng: RngState) -> StabilityEstimate:
    """Monte-Carlo estimate of P[C(x') = C(x)] for x' ~ N(x, sigma^2 I)."""
    if n < 1:
        raise InvalidInput("n must be >= 1")
    if sigma < 0:
        raise InvalidInput("sigma must be >= 0")
    x = np.asarray(x, dtype=np.float64).ravel()
    ref = int(classifier.labels(x[None, :])[0])
    samples = gaussian_sample(rng, x, sigma, n)
    matches = int(np.count_nonzero(classifier.labels(samples) == ref))
    return StabilityEstimate(gamma_hat=matches / n, n_samples=n, sigma=sigma,
                             reference_class=ref)


_MAX_RANGE_DOUBLINGS = 20  # expansion cap: 2**20 times the initial window


def _pool_trace(trace, gamma, center, n, window: float = 0.3):
    """Variance-weighted local line fit of the trace, solved for gamma.

    Pools every stability estimate taken within a multiplicative window of
    the stopping sigma; each point weighs by its binomial variance.  Returns
    None when too few points or a non-decreasing fit make inversion
    unreliable.
    """
    pts = [(s, g) for s, g in trace
           if center / (1 + window) <= s <= center * (1 + window)]
    if len(pts) < 3:
        return None
    sig = np.array([p[0] for p in pts])
    ghat = np.array([p[1] for p in pts])
    var = np.maximum(ghat * (1 - ghat), 1e-4) / n
    w = 1.0 / var
    sw = w.sum()
    sbar = (w * sig).sum() / sw
    gbar = (w * ghat).sum() / sw
    cov = (w * (sig - sbar) * (ghat - gbar)).sum()
    ss = (w * (sig - sbar) ** 2).sum()
    if ss <= 0 or cov >= 0:
        return None  # stability must fall with sigma for the inversion
    slope = cov / ss
    pooled = sbar + (gamma - gbar) / slope
    if not (sig.min() * 0.5 <= pooled <= sig.max() * 2.0):
        return None
    return float(pooled)


def persistence_bracket(classifier, x, gamma: float = 0.7, n: int = 1000,
                        max_steps: int = 60, precision: float = 0.01,
                        rng: RngState | None = None,
                        sigma_init: tuple = (0.5, 1.5),
                        refine_evals: int = 5) -> PersistenceResult:
    """Bisection estimate of the largest sigma at which x stays gamma-stable.

    A range finder first halves sigma_min / doubles sigma_max until the
    estimated stability brackets gamma, then bisects until the estimate is
    within ``precision`` of gamma or the step budget runs out.  If stability
    never falls below gamma within the expansion cap the result is the
    UNBOUNDED sentinel.

    A single n-sample estimate at the stopping sigma carries Monte-Carlo
    noise of order sqrt(gamma(1-gamma)/n), so after the stopping rule fires
    the bisection runs ``refine_evals`` further iterations and the returned
    sigma pools the local trace (variance-weighted inversion of the
    stability-vs-sigma line).  The pooled value is accepted only if a fresh
    estimate there stays within ``precision`` of gamma, keeping the
    convergence contract exact.
    """
    if not 0.0 < gamma < 1.0:
        raise InvalidInput("gamma must lie in (0, 1)")
    if rng is None:
        rng = RngState(0)
    x = np.asarray(x, dtype=np.float64).ravel()
    trace: list = []

    def gamma_hat(sigma):
        est = stability(classifier, x, sigma, n, rng)
        trace.append((sigma, est.gamma_hat))
        return est.gamma_hat

    sigma_min, sigma_max = float(sigma_init[0]), float(sigma_init[1])
    # the upper expansion must see stability clearly below gamma, not just
    # Monte-Carlo noise dipping under it, or limits like gamma = 1/2 on a
    # half space would spuriously "bracket"
    noise_margin = 2.0 * math.sqrt(gamma * (1.0 - gamma) / n)
    g_lo = gamma_hat(sigma_min)
    g_hi = gamma_hat(sigma_max)
    for _ in range(_MAX_RANGE_DOUBLINGS):
        if g_lo >= gamma:
            break
        sigma_min *= 0.5
        g_lo = gamma_hat(sigma_min)
    else:
        return PersistenceResult(gamma=gamma, sigma_star=sigma_min,
                                 converged=False, trace=trace)
    for _ in range(_MAX_RANGE_DOUBLINGS):
        if g_hi < gamma - noise_margin:
            break
        sigma_max *= 2.0
        g_hi = gamma_hat(sigma_max)
    else:
        return PersistenceResult(gamma=gamma, sigma_star=UNBOUNDED,
                                 converged=False, trace=trace)

    sigma = 0.5 * (sigma_min + sigma_max)
    stop_sigma = None
    remaining_refines = refine_evals
    for _ in range(max_steps):
        sigma = 0.5 * (sigma_min + sigma_max)
        g_new = gamma_hat(sigma)
        if abs(g_new - gamma) < precision and stop_sigma is None:
            stop_sigma = sigma
        if g_new > gamma:
            sigma_min = sigma
        else:
            sigma_max = sigma
        if stop_sigma is not None:
            if remaining_refines <= 0:
                break
            remaining_refines -= 1
    if stop_sigma is None:
        return PersistenceResult(gamma=gamma, sigma_star=sigma,
                                 converged=False, trace=trace)
    pooled = _pool_trace(trace, gamma, stop_sigma, n)
    if pooled is not None:
        g_check = gamma_hat(pooled)
        if abs(g_check - gamma) <= precision:
            return PersistenceResult(gamma=gamma, sigma_star=pooled,
                                     converged=True, trace=trace)
    return PersistenceResult(gamma=gamma, sigma_star=stop_sigma,
                             converged=True, trace=trace)


def wedge_persistence_oracle(k: int, d: float, gamma: float) -> float:
    """Closed-form persistence for a point distance d from each of k
    orthogonal sheets: d / (sqrt(2) * erf_inv(2 gamma^(1/k) - 1)).

    Returns UNBOUNDED when gamma^(1/k) <= 1/2 (stability never drops that
    low for a half-space-like boundary).
    """
    if not 0.0 < gamma < 1.0:
        raise InvalidInput("gamma must lie in (0, 1)")
    if k < 1 or d <= 0:
        raise InvalidInput("need k >= 1 and d > 0")
    root = gamma ** (1.0 / k)
    if root <= 0.5:
        return UNBOUNDED
    return d / (math.sqrt(2.0) * erf_inv(2.0 * root - 1.0))


def persistence_curve(classifier, x_from, x_to, steps: int = 21,
                      gamma: float = 0.7, n: int = 1000,
                      precision: float = 0.01, rng: RngState | None = None,
                      sigma_init: tuple = (0.5, 1.5)):
    """Class label and persistence along the straight-line interpolation.

    Returns a list of (t, label, sigma_star, converged) for t equally spaced
    in [0, 1].
    """
    if rng is None:
        rng = RngState(0)
    x_from = np.asarray(x_from, dtype=np.float64).ravel()
    x_to = np.asarray(x_to, dtype=np.float64).ravel()
    out = []
    for i in range(steps):
        t = i / (steps - 1) if steps > 1 else 0.0
        x_t = (1.0 - t) * x_from + t * x_to
        label = int(classifier.labels(x_t[None, :])[0])
        res = persistence_bracket(classifier, x_t, gamma=gamma, n=n,
                                  precision=precision, rng=rng.split(i),
                                  sigma_init=sigma_init)
        out.append((t, label, res.sigma_star, res.converged))
    return out


def _top_pair_gap(logp_row):
    order = np.argsort(logp_row)[::-1]
    return order[0], order[1], float(logp_row[order[0]] - logp_row[order[1]])


def boundary_bisect(classifier: ModelClassifier, x_a, x_b,
                    gap_tol: float = 1e-10, max_iters: int = 200) -> BoundaryCrossing:
    """Locate the decision boundary on the segment [x_a, x_b].

    Endpoints must be classified differently.  Bisection runs on the sign of
    the margin of x_a's class until the top-two logit gap at the midpoint
    falls below gap_tol * scale.  If the tying pair involves a class other
    than the endpoints', that is reported.
    """
    x_a = np.asarray(x_a, dtype=np.float64).ravel()
    x_b = np.asarray(x_b, dtype=np.float64).ravel()
    logp = classifier.log_probs(np.vstack([x_a, x_b]))
    c_a = int(np.argmax(logp[0]))
    c_b = int(np.argmax(logp[1]))
    if c_a == c_b:
        raise InvalidInput("endpoints must be classified differently")
    scale = max(1.0, float(np.max(np.abs(logp))))

    def margin(t):
        z = classifier.log_probs(((1.0 - t) * x_a + t * x_b)[None, :])[0]
        others = np.delete(z, c_a)
        return float(z[c_a] - others.max()), z

    lo, hi = 0.0, 1.0
    t = 0.5
    best = None
    for _ in range(max_iters):
        t = 0.5 * (lo + hi)
        m, z = margin(t)
        k0, k1, gap = _top_pair_gap(z)
        if best is None or gap < best[0]:
            best = (gap, t, k0, k1)
        if gap <= gap_tol * scale:
            break
        if m > 0:
            lo = t
        else:
            hi = t
    gap, t, k0, k1 = best
    pair = (int(k0), int(k1))
    third = not set(pair) <= {c_a, c_b}
    x_cross = (1.0 - t) * x_a + t * x_b
    return BoundaryCrossing(x_boundary=x_cross, class_pair=pair,
                            logit_gap=gap, t=t, third_class=third)


def _bisect_rows(classifier, A, B, iters: int = 90):
    """Vectorized boundary bisection per row pair; rows of A and B must be
    classified differently."""
    ref = classifier.labels(A)
    lo = np.zeros(A.shape[0])
    hi = np.ones(A.shape[0])
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        X = A + mid[:, None] * (B - A)
        same = classifier.labels(X) == ref
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    mid = 0.5 * (lo + hi)
    return A + mid[:, None] * (B - A)


def boundary_normal(classifier: ModelClassifier, attack_fn, x_b,
                    n_samples: int = 5000, sigma: float = 1e-6,
                    rng: RngState | None = None,
                    degeneracy_tol: float = 1e-12) -> NormalEstimate:
    """Estimate the boundary normal at x_b from projected Gaussian samples.

    Draws n_samples from N(x_b, sigma^2 I); each sample is pushed across the
    boundary by ``attack_fn`` (a batch map returning points classified
    differently), re-bisected back onto the boundary, and the centered
    projections are analyzed by SVD.  The normal is the right singular
    vector of the smallest singular value, oriented toward the attacked
    side.  A gap below ``degeneracy_tol`` between the two smallest singular
    values flags the estimate as low confidence.
    """
    if rng is None:
        rng = RngState(0)
    x_b = np.asarray(x_b, dtype=np.float64).ravel()
    samples = gaussian_sample(rng, x_b, sigma, n_samples)
    attacked = np.atleast_2d(attack_fn(samples))
    crossed = classifier.labels(samples) != classifier.labels(attacked)
    samples, attacked = samples[crossed], attacked[crossed]
    if samples.shape[0] < x_b.size + 1:
        raise InvalidInput(
            f"only {samples.shape[0]} samples crossed the boundary; "
            "need more than the ambient dimension")
    projected = _bisect_rows(classifier, samples, attacked)
    diffs = projected - x_b[None, :]
    res = svd(diffs)
    normal = res.vt[-1].copy()
    s = res.s
    low_confidence = bool(s[-2] - s[-1] < degeneracy_tol) if s.size >= 2 else True
    # orient toward the attacked (adversarial) side
    side = attacked.mean(axis=0) - x_b
    if float(normal @ side) < 0:
        normal = -normal
    normal /= np.linalg.norm(normal)
    return NormalEstimate(normal=normal, singular_values=s,
                          low_confidence=low_confidence,
                          n_used=samples.shape[0])


def crossing_angles(normal: np.ndarray, directions) -> np.ndarray:
    """Angle between each direction and the boundary, in [0, pi/2].

    pi/2 means the direction is parallel to the normal (orthogonal to the
    boundary); 0 means it lies in the boundary.  Invariant under scaling of
    the direction vectors.
    """
    normal = np.asarray(normal, dtype=np.float64).ravel()
    nn = np.linalg.norm(normal)
    if nn == 0:
        raise InvalidInput("normal must be nonzero")
    out = []
    for d in np.atleast_2d(np.asarray(directions, dtype=np.float64)):
        dn = np.linalg.norm(d)
        if dn == 0:
            raise InvalidInput("directions must be nonzero")
        cosang = abs(float(d @ normal)) / (dn * nn)
        out.append(math.asin(min(1.0, cosang)))
    return np.array(out)


def stability_grid(classifier, x_from, x_to, ts, sigmas, n: int,
                   rng: RngState) -> np.ndarray:
    """Match-fraction heatmap along an interpolation.

    Entry (i, j) is the fraction of N(x_t, sigma_j^2 I) samples classified
    like x_t, for t = ts[i]."""
    x_from = np.asarray(x_from, dtype=np.float64).ravel()
    x_to = np.asarray(x_to, dtype=np.float64).ravel()
    out = np.empty((len(ts), len(sigmas)))
    for i, t in enumerate(ts):
        x_t = (1.0 - t) * x_from + t * x_to
        point_rng = rng.split(i)
        for j, sig in enumerate(sigmas):
            out[i, j] = stability(classifier, x_t, sig, n, point_rng).gamma_hat
    return out
