"""Adversarial example generation and the distortion metric.

All attacks respect the [0, 1] box exactly when one is requested, are
deterministic given the RngState they receive, and treat the model state as
read-only, so attacks on distinct inputs can run concurrently.  sign(0) is 0,
which is why the FGSM distortion equals epsilon only when no gradient
component vanishes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import InvalidInput
from .model import ModelSpec, forward, predict_labels
from .numerics import RngState, lbfgs_minimize

__all__ = [
    "AdversarialExample",
    "distortion",
    "fgsm",
    "fgsm_perturb_batch",
    "igsm",
    "pgd",
    "min_distortion_attack",
    "attack_batch_csv",
]


@dataclass
class AdversarialExample:
    original: np.ndarray
    perturbed: np.ndarray
    original_label: int
    predicted_label: int
    target_label: int | None
    distortion: float
    success: bool
    attack_name: str
    iterations: int


def distortion(x: np.ndarray, x_adv: np.ndarray) -> float:
    """Dimension-normalized L2 perturbation size: |x_adv - x|_2 / sqrt(n)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    x_adv = np.asarray(x_adv, dtype=np.float64).ravel()
    if x.size != x_adv.size:
        raise InvalidInput("distortion needs same-dimension inputs")
    diff = x_adv - x
    return float(np.sqrt((diff @ diff) / x.size))


def _clip_box(x, box):
    if box is None:
        return x
    return np.clip(x, box[0], box[1])


def _result(spec, theta, x, x_adv, y_label, target, name, iters) -> AdversarialExample:
    pred = int(predict_labels(spec, theta, x_adv[None, :])[0])
    if target is None:
        success = pred != int(y_label)
    else:
        success = pred == int(target)
    return AdversarialExample(
        original=np.asarray(x, dtype=np.float64).copy(),
        perturbed=x_adv,
        original_label=int(y_label),
        predicted_label=pred,
        target_label=None if target is None else int(target),
        distortion=distortion(x, x_adv),
        success=success,
        attack_name=name,
        iterations=iters,
    )


def _loss_input_grad(spec, theta, X, labels):
    # dL/dx for CCE is the input gradient of <-y, logp>
    C = np.zeros((X.shape[0], spec.n_classes))
    C[np.arange(X.shape[0]), labels] = -1.0
    return backend.input_grads(theta, spec.layer_sizes, X, C)


def fgsm_perturb_batch(spec: ModelSpec, theta, X, Y_one_hot, epsilon,
                       box=(0.0, 1.0)) -> np.ndarray:
    """Single signed-gradient step for a whole batch (used by adversarial
    training); labels are the pre-perturbation classes."""
    labels = np.argmax(Y_one_hot, axis=1)
    g = _loss_input_grad(spec, theta, np.asarray(X, dtype=np.float64), labels)
    return _clip_box(X + epsilon * np.sign(g), box)


def fgsm(spec: ModelSpec, theta, x, y_label, epsilon, box=(0.0, 1.0)) -> AdversarialExample:
    """x + eps * sign(grad_x loss), clipped to the box."""
    if epsilon < 0:
        raise InvalidInput("epsilon must be >= 0")
    x = np.asarray(x, dtype=np.float64).ravel()
    g = _loss_input_grad(spec, theta, x[None, :], [int(y_label)])[0]
    x_adv = _clip_box(x + epsilon * np.sign(g), box)
    res = _result(spec, theta, x, x_adv, y_label, None, "fgsm", 1)
    if not np.any(g):
        res.success = False
    return res


def _clip_linf(x_adv, x, epsilon, box):
    x_adv = np.minimum(np.maximum(x_adv, x - epsilon), x + epsilon)
    return _clip_box(x_adv, box)


def igsm(spec: ModelSpec, theta, x, y_label, epsilon, alpha, iters,
         target: int | None = None, box=(0.0, 1.0)) -> AdversarialExample:
    """Iterated signed-gradient steps clipped to an L-inf neighborhood.

    Untargeted ascends the loss at the true label; targeted descends the
    loss toward the target class.  Stops early once the goal is met.
    """
    if alpha > epsilon:
        raise InvalidInput("alpha must be <= epsilon")
    if iters < 1:
        raise InvalidInput("iters must be >= 1")
    x = np.asarray(x, dtype=np.float64).ravel()
    x_adv = x.copy()
    used = 0
    for it in range(iters):
        used = it + 1
        if target is None:
            g = _loss_input_grad(spec, theta, x_adv[None, :], [int(y_label)])[0]
            x_adv = x_adv + alpha * np.sign(g)
        else:
            g = _loss_input_grad(spec, theta, x_adv[None, :], [int(target)])[0]
            x_adv = x_adv - alpha * np.sign(g)
        x_adv = _clip_linf(x_adv, x, epsilon, box)
        pred = int(predict_labels(spec, theta, x_adv[None, :])[0])
        if (target is None and pred != int(y_label)) or \
           (target is not None and pred == int(target)):
            break
    return _result(spec, theta, x, x_adv, y_label, target, "igsm", used)


def pgd(spec: ModelSpec, theta, x, y_label, epsilon, alpha, iters,
        norm: str = "linf", random_start: bool = False,
        rng: RngState | None = None, target: int | None = None,
        box=(0.0, 1.0)) -> AdversarialExample:
    """Projected gradient ascent on the loss within an epsilon ball.

    norm "linf": per-coordinate budget epsilon with signed steps.  norm "l2":
    distortion budget (|x'-x|_2/sqrt(n) <= epsilon) with normalized gradient
    steps; projection runs after every iteration.
    """
    if norm not in ("linf", "l2"):
        raise InvalidInput(f"norm must be 'linf' or 'l2', got {norm!r}")
    if iters < 1:
        raise InvalidInput("iters must be >= 1")
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    radius = epsilon * math.sqrt(n)  # l2 ball radius for distortion epsilon

    def project(z):
        if norm == "linf":
            return _clip_linf(z, x, epsilon, box)
        diff = z - x
        nrm = np.linalg.norm(diff)
        if nrm > radius and nrm > 0:
            diff *= radius / nrm
        return _clip_box(x + diff, box)

    x_adv = x.copy()
    if random_start and epsilon > 0:
        if rng is None:
            raise InvalidInput("random_start requires an RngState")
        if norm == "linf":
            x_adv = project(x + rng.uniform(-epsilon, epsilon, size=n))
        else:
            direction = rng.normal(size=n)
            direction /= max(np.linalg.norm(direction), 1e-30)
            scale = radius * rng.uniform() ** (1.0 / n)
            x_adv = project(x + scale * direction)

    used = 0
    for it in range(iters):
        used = it + 1
        lab = int(y_label) if target is None else int(target)
        g = _loss_input_grad(spec, theta, x_adv[None, :], [lab])[0]
        sgn = 1.0 if target is None else -1.0
        if norm == "linf":
            x_adv = x_adv + sgn * alpha * np.sign(g)
        else:
            gn = np.linalg.norm(g)
            if gn > 0:
                x_adv = x_adv + sgn * alpha * math.sqrt(n) * g / gn
        x_adv = project(x_adv)
        pred = int(predict_labels(spec, theta, x_adv[None, :])[0])
        if (target is None and pred != int(y_label)) or \
           (target is not None and pred == int(target)):
            break
    return _result(spec, theta, x, x_adv, y_label, target, f"pgd-{norm}", used)


def min_distortion_attack(spec: ModelSpec, theta, x, target: int,
                          c_schedule=(10.0, 1.0, 0.1, 0.01),
                          box=(0.0, 1.0), max_iters: int = 300) -> AdversarialExample:
    """Smallest-perturbation targeted attack via a penalized quasi-Newton solve.

    Minimizes c * |r|^2 + CCE(f(clip(x + r)), target) for a decreasing
    penalty schedule c and keeps the smallest-distortion success.  The box
    projection is applied inside the objective; its (sub)gradient masks
    coordinates pinned at the box faces.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    target = int(target)
    y_target = np.zeros(spec.n_classes)
    y_target[target] = 1.0
    current = int(predict_labels(spec, theta, x[None, :])[0])
    if current == target:
        return _result(spec, theta, x, x.copy(), current, target, "min-distortion", 0)

    sizes = spec.layer_sizes
    best: AdversarialExample | None = None
    total_iters = 0

    def objective_factory(c):
        def objective(r):
            z = x + r
            if box is not None:
                inside = (z > box[0]) & (z < box[1])
                z = np.clip(z, box[0], box[1])
            else:
                inside = np.ones_like(z, dtype=bool)
            logp = backend.forward(theta, sizes, z[None, :])[0]
            loss = float(-(y_target * logp).sum())
            g = backend.input_grads(theta, sizes, z[None, :], -y_target[None, :])[0]
            grad = 2.0 * c * r + g * inside
            return c * float(r @ r) + loss, grad
        return objective

    for c in c_schedule:
        res = lbfgs_minimize(objective_factory(float(c)), np.zeros_like(x),
                             memory=10, max_iters=max_iters, grad_tol=1e-10)
        total_iters += res.n_iters
        x_adv = _clip_box(x + res.x, box)
        cand = _result(spec, theta, x, x_adv, current, target,
                       "min-distortion", total_iters)
        if cand.success and (best is None or cand.distortion < best.distortion):
            best = cand
        if best is not None and c <= 0.01:
            break
    if best is None:
        # report the closest attempt even though it failed
        best = cand
    best.iterations = total_iters
    return best


def attack_batch_csv(path, examples) -> None:
    """CSV dialect: comma, '.' decimal, header row, LF line endings."""
    with open(path, "w", newline="") as fh:
        fh.write("id,original_label,target,success,distortion,iterations\n")
        for i, ex in enumerate(examples):
            target = "" if ex.target_label is None else ex.target_label
            fh.write(f"{i},{ex.original_label},{target},{int(ex.success)},"
                     f"{ex.distortion:.17g},{ex.iterations}\n")
