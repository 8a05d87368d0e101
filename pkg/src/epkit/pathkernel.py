"""Exact path-kernel representation of a checkpointed training run.

A trained prediction decomposes as the initial (constant) output plus, for
every training step s and training point i, a kernel term: the test-side
parameter gradient integrated along the segment theta_s -> theta_{s+1}
against the training-side gradient frozen at the segment start.  Summed with
the construction weights a_{i,s} = -eps_s * dL/df(f(x_i; theta_s), y_i) this
reproduces the network output, up to quadrature error in the integral, which
the substep count controls.

The training side of the prediction contracts per step before the inner
product (sum_i a_{i,s} (x) grad_i collapses to the realized parameter step),
which is algebraically identical to the per-point ensemble sum;
``epk_predict_contributions`` keeps the per-training-point terms when the
decomposition itself is wanted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import InvalidInput, InvalidPath, ReductionInvalid
from .numerics import RngState
from .train import TrainingPath

__all__ = [
    "EpkConfig",
    "quadrature_nodes",
    "GramMatrix",
    "KernelWeights",
    "epk_predict",
    "epk_predict_contributions",
    "epk_step_kernel",
    "gram",
    "reduce_to_kernel_machine",
    "refit_kernel_weights",
    "gp_logit_std",
    "epk_convergence_study",
    "alignment_gap",
]


@dataclass(frozen=True)
class EpkConfig:
    """Quadrature resolution and class handling for path-kernel evaluation.

    substeps T >= 1 nodes resolve the integral over each training segment.
    Rules: "trapezoid" (default, order 2), "midpoint", and "left" (left
    Riemann sum; T=1 reproduces the step-start discrete kernel of earlier
    path-kernel formulations).  class_reduction picks the full KxK block
    kernel or the class-summed scalar kernel.
    """

    substeps: int = 100
    rule: str = "trapezoid"
    class_reduction: str = "full"   # "full" | "class-sum"

    def __post_init__(self):
        if self.substeps < 1:
            raise InvalidInput("substeps must be >= 1")
        if self.rule not in ("trapezoid", "midpoint", "left"):
            raise InvalidInput(f"unknown quadrature rule {self.rule!r}")
        if self.class_reduction not in ("full", "class-sum"):
            raise InvalidInput(f"unknown class reduction {self.class_reduction!r}")


def quadrature_nodes(cfg: EpkConfig):
    """(nodes, weights) over [0, 1] for the configured rule."""
    T = cfg.substeps
    if cfg.rule == "left":
        return np.arange(T) / T, np.full(T, 1.0 / T)
    if cfg.rule == "midpoint":
        return (np.arange(T) + 0.5) / T, np.full(T, 1.0 / T)
    nodes = np.arange(T + 1) / T
    weights = np.full(T + 1, 1.0 / T)
    weights[0] = weights[-1] = 0.5 / T
    return nodes, weights


@dataclass
class GramMatrix:
    """Kernel matrix over a point set: per-class diagonal blocks plus the
    class-summed reduction.  Step sizes weight each step's contribution."""

    per_class: np.ndarray         # (K, n, n)
    reduced: np.ndarray           # (n, n), class-summed-gradient kernel
    point_ids: np.ndarray

    def matrix(self, class_index: int | None = None) -> np.ndarray:
        return self.reduced if class_index is None else self.per_class[class_index]


@dataclass
class KernelWeights:
    """Construction weights a[i, s] = -eps_s * dL/df at (x_i, theta_s) and
    the constant bias."""

    a: np.ndarray                 # (N, S, K) or (N, K) after reduction
    bias: np.ndarray              # (K,)


def _check_path(path: TrainingPath):
    if path.n_steps + 1 != path.checkpoints.shape[0]:
        raise InvalidPath("checkpoint count does not match step count")
    if not path.supports_replay:
        raise InvalidPath("path was trained with a data-regenerating or "
                          "second-order objective; per-step gradients are "
                          "not reconstructible")


def epk_predict(path: TrainingPath, X, cfg: EpkConfig | None = None) -> np.ndarray:
    """Kernel-representation prediction: initial output + learned adjustment.

    Exact up to quadrature error; returns log-probability rows (B, K)
    matching the trained network as substeps grow.
    """
    cfg = cfg or EpkConfig()
    _check_path(path)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    sizes = path.spec.layer_sizes
    nodes, weights = quadrature_nodes(cfg)
    out = backend.forward(path.theta(0), sizes, X)
    for s in range(path.n_steps):
        out = out + backend.epk_step_adjust(path.checkpoints[s],
                                            path.checkpoints[s + 1],
                                            sizes, X, nodes, weights)
    return out


def _integrated_test_jacobians(path, s, X, cfg):
    """sum_t w_t J(x; theta_s(t)) for each test row; (B, K, M)."""
    sizes = path.spec.layer_sizes
    nodes, weights = quadrature_nodes(cfg)
    theta0 = path.checkpoints[s]
    delta = path.checkpoints[s + 1] - theta0
    acc = None
    for t, w in zip(nodes, weights):
        jac = backend.class_jacobians(theta0 + t * delta, sizes, X)
        acc = w * jac if acc is None else acc + w * jac
    return acc


def epk_predict_contributions(path: TrainingPath, X, cfg: EpkConfig | None = None):
    """Per-training-point decomposition of the learned adjustment.

    Returns (prediction (B, K), contributions (B, N, K)): contribution
    [b, i, k] is training point i's additive term in output class k for test
    row b, summed over steps.  Agrees with epk_predict up to float
    reassociation.  Quadratic cost; intended for modest point counts.
    """
    cfg = cfg or EpkConfig()
    _check_path(path)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Xtr, _ = path.require_data()
    sizes = path.spec.layer_sizes
    N = Xtr.shape[0]
    K = path.spec.n_classes
    B = X.shape[0]
    contrib = np.zeros((B, N, K))
    for s in range(path.n_steps):
        jbar = _integrated_test_jacobians(path, s, X, cfg)  # (B, K, M)
        batch = path.batches[s]
        lprime = path.loss_prime(s, batch)                  # (nb, K)
        coeff = -path.step_sizes[s] * lprime
        # <per-sample weighted training gradient, integrated test row>
        dots = backend.grad_dots(path.theta(s), sizes, Xtr[batch], coeff,
                                 jbar.reshape(B * K, -1))   # (nb, B*K)
        contrib[:, batch, :] += dots.reshape(len(batch), B, K).transpose(1, 0, 2)
    base = backend.forward(path.theta(0), sizes, X)
    return base + contrib.sum(axis=1), contrib


def epk_step_kernel(path: TrainingPath, s: int, x, x_other,
                    cfg: EpkConfig | None = None,
                    freeze_first: bool = False,
                    freeze_second: bool = True) -> np.ndarray:
    """Single-step kernel block between two points; shape (K, K).

    Frozen arguments are treated as training points (gradient taken at the
    segment start); integrated arguments follow the interpolated parameters.
    The default matches the prediction representation: first argument test,
    second argument training.
    """
    cfg = cfg or EpkConfig()
    _check_path(path)
    if not 0 <= s < path.n_steps:
        raise InvalidInput(f"step {s} outside path range")
    sizes = path.spec.layer_sizes
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    x_other = np.asarray(x_other, dtype=np.float64).reshape(1, -1)
    nodes, weights = quadrature_nodes(cfg)
    theta0 = path.checkpoints[s]
    delta = path.checkpoints[s + 1] - theta0
    j0_first = backend.class_jacobians(theta0, sizes, x)[0]
    j0_second = backend.class_jacobians(theta0, sizes, x_other)[0]
    out = np.zeros((sizes[-1], sizes[-1]))
    for t, w in zip(nodes, weights):
        theta_t = theta0 + t * delta
        j1 = j0_first if freeze_first else \
            backend.class_jacobians(theta_t, sizes, x)[0]
        j2 = j0_second if freeze_second else \
            backend.class_jacobians(theta_t, sizes, x_other)[0]
        out += w * (j1 @ j2.T)
    return out


def gram(path: TrainingPath, points, cfg: EpkConfig | None = None,
         point_ids=None) -> GramMatrix:
    """Kernel matrix over a point set, summed over steps with step-size
    weights.

    All points are treated as test points (both sides integrated), so each
    per-class block and the class-summed reduction are symmetric positive
    semi-definite by construction.
    """
    cfg = cfg or EpkConfig()
    _check_path(path)
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    K = path.spec.n_classes
    sizes = path.spec.layer_sizes
    nodes, weights = quadrature_nodes(cfg)
    per_class = np.zeros((K, n, n))
    reduced = np.zeros((n, n))
    for s in range(path.n_steps):
        theta0 = path.checkpoints[s]
        delta = path.checkpoints[s + 1] - theta0
        eps = path.step_sizes[s]
        for t, w in zip(nodes, weights):
            jac = backend.class_jacobians(theta0 + t * delta, sizes, points)
            for k in range(K):
                block = jac[:, k, :]
                per_class[k] += (eps * w) * (block @ block.T)
            summed = jac.sum(axis=1)
            reduced += (eps * w) * (summed @ summed.T)
    ids = np.arange(n) if point_ids is None else np.asarray(point_ids)
    return GramMatrix(per_class=per_class, reduced=reduced, point_ids=ids)


def construction_weights(path: TrainingPath) -> KernelWeights:
    """a[i, s] = -eps_s * dL/df(f(x_i; theta_s), y_i) for every step."""
    _check_path(path)
    Xtr, _ = path.require_data()
    N = Xtr.shape[0]
    K = path.spec.n_classes
    a = np.zeros((N, path.n_steps, K))
    for s in range(path.n_steps):
        batch = path.batches[s]
        a[batch, s, :] = -path.step_sizes[s] * path.loss_prime(s, batch)
    bias = backend.forward(path.theta(0), path.spec.layer_sizes,
                           Xtr[:1] * 0.0)[0]
    return KernelWeights(a=a, bias=bias)


def reduce_to_kernel_machine(path: TrainingPath, cfg: EpkConfig | None = None,
                             tol: float = 1e-10):
    """Collapse the per-step ensemble into one kernel machine.

    Valid only when the loss gradient is constant across steps (cross
    entropy on log-softmax outputs); otherwise raises ReductionInvalid.
    Returns (KernelWeights with the step-0 weights, evaluator) where
    evaluator(X) reproduces epk_predict through the summed kernel.  Step
    sizes are folded into the summed kernel relative to eps_0, which reduces
    to a plain sum over steps for constant-step paths.
    """
    cfg = cfg or EpkConfig()
    _check_path(path)
    Xtr, _ = path.require_data()
    base = path.loss_prime(0, np.arange(Xtr.shape[0]))
    worst = 0.0
    for s in range(path.n_steps):
        lp = path.loss_prime(s, np.arange(Xtr.shape[0]))
        worst = max(worst, float(np.max(np.abs(lp - base))))
        if worst > tol:
            raise ReductionInvalid(
                f"loss gradient varies across steps (max deviation {worst:.3e})")
    eps0 = float(path.step_sizes[0])
    a0 = -eps0 * base
    sizes = path.spec.layer_sizes
    nodes, weights = quadrature_nodes(cfg)

    def evaluator(X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = backend.forward(path.theta(0), sizes, X)
        for s in range(path.n_steps):
            batch = path.batches[s]
            # summed training-side feature with the constant step-0 weights
            u, _ = backend.weighted_grad_sum(path.theta(s), sizes,
                                             Xtr[batch], a0[batch])
            scale = path.step_sizes[s] / eps0
            theta0 = path.checkpoints[s]
            delta = path.checkpoints[s + 1] - theta0
            for t, w in zip(nodes, weights):
                out = out + (scale * w) * backend.jvp(theta0 + t * delta,
                                                      sizes, X, u)
        return out

    kw = KernelWeights(a=a0, bias=backend.forward(
        path.theta(0), sizes, np.zeros((1, path.spec.input_dim)))[0])
    return kw, evaluator


def refit_kernel_weights(gram_matrix: np.ndarray, labels, rng: RngState,
                         a_init: np.ndarray | None = None, lr: float = 0.1,
                         iters: int = 200, n_classes: int | None = None):
    """Re-optimize kernel machine weights by gradient descent on cross
    entropy.

    gram_matrix is the (n, n) class-summed training Gram; the machine is
    logits[j] = bias + sum_i G[j, i] a[i].  Returns (a, bias, history dict).
    Zero iterations return the starting weights untouched.
    """
    G = np.asarray(gram_matrix, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = G.shape[0]
    if G.shape != (n, n) or labels.shape != (n,):
        raise InvalidInput("gram/labels shapes disagree")
    if n_classes is None:
        n_classes = a_init.shape[1] if a_init is not None \
            else int(labels.max()) + 1
    K = int(n_classes)
    Y = np.zeros((n, K))
    Y[np.arange(n), labels] = 1.0
    a = np.zeros((n, K)) if a_init is None else np.asarray(a_init, dtype=np.float64).copy()
    bias = np.zeros(K)
    losses = []
    diverged = False
    for _ in range(iters):
        logits = bias + G @ a
        zmax = logits.max(axis=1, keepdims=True)
        logp = logits - zmax - np.log(np.exp(logits - zmax).sum(axis=1, keepdims=True))
        loss = float(-(Y * logp).sum()) / n
        if not np.isfinite(loss):
            diverged = True
            break
        losses.append(loss)
        p = np.exp(logp)
        dlogits = (p - Y) / n
        a -= lr * (G.T @ dlogits)
        bias -= lr * dlogits.sum(axis=0)
    logits = bias + G @ a
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return a, bias, {"losses": losses, "train_accuracy": acc, "diverged": diverged}


def gp_logit_std(gram_matrix: np.ndarray, n_classes: int, n_draws: int,
                 rng: RngState) -> np.ndarray:
    """Monte-Carlo softmax-probability spread under a Gaussian-process prior.

    Treats the Gram matrix as the logit covariance per class, draws
    independent logit fields per class, maps through softmax, and returns
    the per-point standard deviation of the winning-class probability
    estimate, shape (n, n_classes) reduced to per-point std per class.
    """
    G = np.asarray(gram_matrix, dtype=np.float64)
    n = G.shape[0]
    evals, evecs = np.linalg.eigh((G + G.T) / 2.0)
    evals = np.clip(evals, 0.0, None)  # PSD floor against round-off
    root = evecs * np.sqrt(evals)
    draws = rng.normal(size=(n_draws, n_classes, n))
    z = draws @ root.T
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs.std(axis=0).T  # (n, n_classes)


def epk_convergence_study(path: TrainingPath, X, substep_list,
                          rule: str = "trapezoid"):
    """Kernel-vs-network error as the integral resolution grows.

    Returns a list of (T, max_abs_err, mean_abs_err).  T = 1 is evaluated
    with the left-endpoint rule: the step-start approximation of earlier
    discrete formulations.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    reference = backend.forward(path.final_theta, path.spec.layer_sizes, X)
    out = []
    for T in substep_list:
        used_rule = "left" if T == 1 else rule
        pred = epk_predict(path, X, EpkConfig(substeps=int(T), rule=used_rule))
        err = np.abs(pred - reference)
        out.append((int(T), float(err.max()), float(err.mean())))
    return out


def alignment_gap(path: TrainingPath, x, cfg: EpkConfig | None = None) -> np.ndarray:
    """Per-step inner product of the training step with the difference
    between integrated and step-start test gradients.

    Measures how far the discrete (step-start) kernel's test-side gradient
    is from the path-integrated one; zero everywhere means the discrete
    approximation was already exact for this point.  Returns (S, K).
    """
    cfg = cfg or EpkConfig()
    _check_path(path)
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    sizes = path.spec.layer_sizes
    nodes, weights = quadrature_nodes(cfg)
    out = np.zeros((path.n_steps, path.spec.n_classes))
    for s in range(path.n_steps):
        theta0 = path.checkpoints[s]
        delta = path.checkpoints[s + 1] - theta0
        integrated = backend.epk_step_adjust(theta0, path.checkpoints[s + 1],
                                             sizes, x, nodes, weights)[0]
        frozen = backend.jvp(theta0, sizes, x, delta)[0]
        out[s] = integrated - frozen
    return out
