"""Decompositions of trained predictions into training-gradient structure.

Two views of the same representation: in parameter space, the span of
loss-weighted training gradients contains every direction that can move a
learned adjustment, giving a truncated basis for out-of-distribution
scoring; in input space, differentiating each training point's contribution
to a test prediction yields a matrix whose spectrum measures the dimension
of the variation the model actually perceives around that test point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import InvalidInput
from .pathkernel import EpkConfig, quadrature_nodes
from .train import TrainingPath

__all__ = [
    "GradientBasis",
    "training_grad_basis",
    "ood_score",
    "ood_scores",
    "query_gradient",
    "input_grad_matrix",
    "SignalSpectrum",
    "signal_dimension",
    "cross_model_alignment",
    "auroc",
]


@dataclass
class GradientBasis:
    """Truncated right-singular basis of stacked training gradients.

    Rows of ``vt`` are orthonormal; ``explained`` is the cumulative
    explained-variance fraction at the truncation rank.
    """

    vt: np.ndarray                 # (r, M)
    singular_values: np.ndarray    # full spectrum, descending
    threshold: float
    explained: float
    source_steps: tuple

    @property
    def rank(self) -> int:
        return self.vt.shape[0]

    def save(self, path) -> None:
        np.savez(path, vt=self.vt, singular_values=self.singular_values,
                 threshold=self.threshold, explained=self.explained,
                 source_steps=np.asarray(self.source_steps))

    @staticmethod
    def load(path) -> "GradientBasis":
        blob = np.load(path)
        return GradientBasis(
            vt=blob["vt"], singular_values=blob["singular_values"],
            threshold=float(blob["threshold"]), explained=float(blob["explained"]),
            source_steps=tuple(int(s) for s in blob["source_steps"]))


def _select_steps(path: TrainingPath, steps):
    if steps == "final":
        return (path.n_steps,)
    if steps == "all":
        return tuple(range(path.n_steps + 1))
    if isinstance(steps, int):
        return tuple(range(0, path.n_steps + 1, steps))
    out = tuple(int(s) for s in steps)
    if not out:
        raise InvalidInput("step selection is empty")
    if any(not 0 <= s <= path.n_steps for s in out):
        raise InvalidInput("step selection outside path range")
    return out


def _loss_weighted_grads(path: TrainingPath, s: int) -> np.ndarray:
    """Rows are dL/dtheta per training point at checkpoint s (class-sum of
    per-class gradients weighted by the loss gradient)."""
    X, Y = path.require_data()
    if path.loss_kind == "cce":
        C = -Y
    else:
        logp = backend.forward(path.theta(s), path.spec.layer_sizes, X)
        C = logp - Y
    return backend.weighted_param_grads(path.theta(s), path.spec.layer_sizes, X, C)


def training_grad_basis(path: TrainingPath, steps="final",
                        threshold: float = 0.95) -> GradientBasis:
    """SVD-truncated span of the loss-weighted training gradients.

    ``steps`` is "final", "all", a stride, or an explicit step list; rows
    from every selected checkpoint are stacked before the SVD.  Truncation
    keeps the smallest rank whose cumulative squared singular values reach
    ``threshold`` of the total.
    """
    if not 0.0 < threshold <= 1.0:
        raise InvalidInput("threshold must lie in (0, 1]")
    chosen = _select_steps(path, steps)
    A = np.vstack([_loss_weighted_grads(path, s) for s in chosen])
    norm = np.linalg.norm(A)
    if norm == 0:
        raise InvalidInput("training gradients are identically zero")
    _, svals, vt = np.linalg.svd(A, full_matrices=False)
    energy = svals ** 2
    cdf = np.cumsum(energy) / energy.sum()
    rank = int(np.searchsorted(cdf, threshold) + 1)
    rank = min(rank, vt.shape[0])
    return GradientBasis(vt=vt[:rank].copy(), singular_values=svals,
                         threshold=threshold, explained=float(cdf[rank - 1]),
                         source_steps=chosen)


def query_gradient(path: TrainingPath, x: np.ndarray,
                  theta: np.ndarray | None = None) -> np.ndarray:
    """Ground-truth-free parameter gradient for scoring a test point.

    Sums the per-class cross-entropy loss gradients over every candidate
    class at the model's current output, collapsing the class dimension
    without needing a label.  Equivalent to seeding the backward pass with
    K * softmax - 1.
    """
    theta = path.final_theta if theta is None else theta
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    sizes = path.spec.layer_sizes
    C = -np.ones((1, path.spec.n_classes))
    return backend.weighted_param_grads(theta, sizes, x, C)[0]


def ood_score(basis: GradientBasis, g: np.ndarray):
    """Residual fraction of a gradient outside the training-gradient span.

    Returns (projection_norm, residual_norm, score) with
    score = |g - g V' V'^T| / |g| in [0, 1]; 0 means fully explained by the
    basis.  A zero gradient is flagged with score None.
    """
    g = np.asarray(g, dtype=np.float64).ravel()
    if g.size != basis.vt.shape[1]:
        raise InvalidInput("gradient dimension does not match basis")
    norm = float(np.linalg.norm(g))
    if norm <= 1e-300:
        return 0.0, 0.0, None
    coeffs = basis.vt @ g
    projection = basis.vt.T @ coeffs
    residual = g - projection
    return (float(np.linalg.norm(projection)), float(np.linalg.norm(residual)),
            float(np.linalg.norm(residual) / norm))


def ood_scores(path: TrainingPath, basis: GradientBasis, X: np.ndarray) -> np.ndarray:
    """Vector of residual-fraction scores for a batch of unlabeled points."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    theta = path.final_theta
    sizes = path.spec.layer_sizes
    C = -np.ones((X.shape[0], path.spec.n_classes))
    G = backend.weighted_param_grads(theta, sizes, X, C)
    norms = np.linalg.norm(G, axis=1)
    coeffs = G @ basis.vt.T
    residual = G - coeffs @ basis.vt
    out = np.full(X.shape[0], np.nan)
    ok = norms > 1e-300
    out[ok] = np.linalg.norm(residual[ok], axis=1) / norms[ok]
    return out


def input_grad_matrix(path: TrainingPath, x_test: np.ndarray,
                      cfg: EpkConfig | None = None):
    """Training-input sensitivity of one test prediction.

    Row j is the gradient, with respect to training input x_j, of the
    learned adjustment at x_test, accumulated over steps with the inner
    product taken first (only vectors are ever stored per training datum).
    Under cross entropy the loss-gradient term is constant in x_j, so only
    the mixed second-derivative term survives; other losses would add a
    dL'/dx term that is not implemented here.

    class_reduction "class-sum" gives (N, d); "full" gives (K, N, d).  Also
    returns the pre-differentiation per-point contributions (N, K), whose
    sum reproduces the learned adjustment of the kernel prediction.
    """
    cfg = cfg or EpkConfig()
    X, Y = path.require_data()
    if path.loss_kind != "cce":
        raise InvalidInput("input gradient decomposition requires the "
                           "constant-loss-gradient (cce) setting")
    x_test = np.asarray(x_test, dtype=np.float64).reshape(1, -1)
    sizes = path.spec.layer_sizes
    N, d = X.shape
    K = path.spec.n_classes
    nodes, weights = quadrature_nodes(cfg)

    per_class = cfg.class_reduction == "full"
    G = np.zeros((K, N, d)) if per_class else np.zeros((N, d))
    contributions = np.zeros((N, K))
    C_train = -Y
    for s in range(path.n_steps):
        theta0 = path.checkpoints[s]
        delta = path.checkpoints[s + 1] - theta0
        eps = path.step_sizes[s]
        jbar = np.zeros((K, theta0.size))
        for t, w in zip(nodes, weights):
            jbar += w * backend.class_jacobians(theta0 + t * delta, sizes,
                                                x_test)[0]
        batch = path.batches[s]
        contributions[batch] += -eps * backend.grad_dots(
            theta0, sizes, X[batch], C_train[batch], jbar)
        if per_class:
            for k in range(K):
                G[k][batch] += -eps * backend.mixed_grad_x(
                    theta0, sizes, X[batch], C_train[batch], jbar[k])
        else:
            a = jbar.sum(axis=0)
            G[batch] += -eps * backend.mixed_grad_x(
                theta0, sizes, X[batch], C_train[batch], a)
    return G, contributions


@dataclass
class SignalSpectrum:
    """Spectrum of the training-input sensitivity matrix at one test point."""

    point_id: int
    singular_values: np.ndarray
    cdf: np.ndarray             # cumulative explained-variance fractions
    n95: int                    # components reaching 95% explained variance

    def n_components(self, fraction: float) -> int:
        return int(np.searchsorted(self.cdf, fraction) + 1)


def signal_dimension(G: np.ndarray, point_id: int = 0) -> SignalSpectrum:
    """SVD spectrum of the sensitivity matrix; n95 counts the components
    explaining 95% of squared variation."""
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2:
        raise InvalidInput("signal_dimension expects the (N, d) reduced matrix")
    if not np.any(G):
        raise InvalidInput("sensitivity matrix is identically zero")
    svals = np.linalg.svd(G, compute_uv=False)
    energy = svals ** 2
    cdf = np.cumsum(energy) / energy.sum()
    n95 = int(np.searchsorted(cdf, 0.95) + 1)
    return SignalSpectrum(point_id=point_id, singular_values=svals,
                          cdf=cdf, n95=n95)


def cross_model_alignment(G_a: np.ndarray, G_b: np.ndarray,
                          n_components: int | None = None):
    """How much of one model's input-variation modes lie in another's.

    Both matrices are (N, d) sensitivity matrices for the same test point
    and training set.  For each right-singular direction of B, reports the
    squared norm of its projection onto A's leading ``n_components``
    directions (1 means fully contained).  Also returns the
    explained-variance-weighted aggregate.
    """
    G_a = np.asarray(G_a, dtype=np.float64)
    G_b = np.asarray(G_b, dtype=np.float64)
    if G_a.shape[1] != G_b.shape[1]:
        raise InvalidInput("sensitivity matrices must share the input dimension")
    _, sa, vta = np.linalg.svd(G_a, full_matrices=False)
    _, sb, vtb = np.linalg.svd(G_b, full_matrices=False)
    if n_components is None:
        n_components = int(np.sum(sa > 1e-12 * sa[0])) if sa.size else 0
    lead = vta[:n_components]
    overlaps = np.linalg.norm(vtb @ lead.T, axis=1) ** 2
    weights = sb ** 2 / np.sum(sb ** 2)
    return {
        "component_overlap": overlaps,
        "weighted_overlap": float(np.sum(overlaps * weights)),
        "n_components": n_components,
    }


def auroc(scores_negative: np.ndarray, scores_positive: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic.

    Positive examples are the ones expected to score higher.
    """
    neg = np.asarray(scores_negative, dtype=np.float64)
    pos = np.asarray(scores_positive, dtype=np.float64)
    if neg.size == 0 or pos.size == 0:
        raise InvalidInput("both score sets must be non-empty")
    combined = np.concatenate([neg, pos])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty_like(order, dtype=np.float64)
    ranks[order] = np.arange(1, combined.size + 1)
    # average ranks over ties
    sorted_vals = combined[order]
    i = 0
    while i < sorted_vals.size:
        j = i
        while j + 1 < sorted_vals.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[neg.size:].sum()
    n_pos, n_neg = pos.size, neg.size
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
