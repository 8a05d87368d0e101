"""Gradient-descent training with every intermediate parameter state kept.

The recorded path (checkpoints, per-step learning rates, per-step batch
index lists) is the substrate the path-kernel machinery integrates over, so
the update is exactly theta_{s+1} = theta_s - eps_s * sum_{i in batch} grad_i
with the batch-sum convention, and replaying any step must reproduce the next
checkpoint to machine precision.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .data import Dataset
from .errors import InvalidInput, InvalidPath, TrainingDiverged
from .model import ModelSpec, init_params
from .numerics import RngState

__all__ = [
    "TrainConfig",
    "AdvTrainConfig",
    "TrainingPath",
    "train",
    "train_mag",
    "mag_alignment_metric",
]


@dataclass(frozen=True)
class AdvTrainConfig:
    """Adversarial-training settings: examples are regenerated every epoch
    from the current parameters and labeled with their pre-perturbation
    class."""

    kind: str = "fgsm"
    epsilon: float = 0.1


@dataclass
class TrainConfig:
    steps: int = 100
    lr: float | np.ndarray = 1e-3            # scalar or per-step schedule
    batch_size: int | None = None            # None: full batch
    seed: int = 0
    loss: str = "cce"                        # "cce" | "mse" (mse is a diagnostic loss)
    final_layer_zero: bool = True
    init_scale: float | None = None
    mag_alpha: float = 0.0
    mag_components: np.ndarray | None = None
    mag_grad_method: str = "analytic"        # "analytic" | "fd"
    adversarial: AdvTrainConfig | None = None

    def step_sizes(self) -> np.ndarray:
        if np.isscalar(self.lr):
            return np.full(self.steps, float(self.lr))
        lr = np.asarray(self.lr, dtype=np.float64)
        if lr.shape != (self.steps,):
            raise InvalidInput(f"lr schedule must have length {self.steps}")
        return lr.copy()

    def validate(self, ds: Dataset) -> None:
        if self.steps < 0:
            raise InvalidInput("steps must be >= 0")
        if self.batch_size is not None and not 1 <= self.batch_size <= ds.n:
            raise InvalidInput("batch_size must lie in [1, N]")
        if self.loss not in ("cce", "mse"):
            raise InvalidInput(f"unknown loss {self.loss!r}")
        if self.mag_alpha < 0:
            raise InvalidInput("mag_alpha must be >= 0")


@dataclass
class TrainingPath:
    """Checkpoints theta_0..theta_S plus the step data needed to replay them."""

    spec: ModelSpec
    checkpoints: np.ndarray                  # (S+1, M)
    step_sizes: np.ndarray                   # (S,)
    batches: list                            # per-step index arrays
    loss_trace: np.ndarray                   # (S,) batch-summed loss
    loss_kind: str = "cce"
    inputs: np.ndarray | None = None         # training inputs the path was built on
    targets: np.ndarray | None = None        # matching one-hot targets
    supports_replay: bool = True

    @property
    def n_steps(self) -> int:
        return len(self.step_sizes)

    def theta(self, s: int) -> np.ndarray:
        return self.checkpoints[s]

    def delta(self, s: int) -> np.ndarray:
        return self.checkpoints[s + 1] - self.checkpoints[s]

    @property
    def final_theta(self) -> np.ndarray:
        return self.checkpoints[-1]

    def require_data(self):
        if self.inputs is None or self.targets is None:
            raise InvalidPath("path does not carry its training data")
        return self.inputs, self.targets

    def loss_prime(self, s: int, batch: np.ndarray) -> np.ndarray:
        """Per-sample dL/df rows at step s for the given batch indices."""
        X, Y = self.require_data()
        if self.loss_kind == "cce":
            return -Y[batch]
        logp = backend.forward(self.theta(s), self.spec.layer_sizes, X[batch])
        return logp - Y[batch]

    def max_replay_error(self) -> float:
        """Worst |theta_{s+1} - (theta_s - eps_s * batch grad)| over the path."""
        X, Y = self.require_data()
        worst = 0.0
        for s in range(self.n_steps):
            batch = self.batches[s]
            c = self.loss_prime(s, batch)  # dL/df rows are the gradient seeds
            grad, _ = backend.weighted_grad_sum(self.theta(s), self.spec.layer_sizes,
                                                X[batch], c)
            stepped = self.theta(s) - self.step_sizes[s] * grad
            worst = max(worst, float(np.max(np.abs(stepped - self.checkpoints[s + 1]))))
        return worst

    def save(self, out_dir) -> None:
        """Directory layout: manifest.json, checkpoints/step_%05d.npy, loss CSV."""
        os.makedirs(out_dir, exist_ok=True)
        ck_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ck_dir, exist_ok=True)
        for s in range(self.n_steps + 1):
            np.save(os.path.join(ck_dir, f"step_{s:05d}.npy"), self.checkpoints[s])
        manifest = {
            "layer_sizes": list(self.spec.layer_sizes),
            "n_steps": self.n_steps,
            "step_sizes": self.step_sizes.tolist(),
            "loss_kind": self.loss_kind,
            "supports_replay": self.supports_replay,
            "batches": [b.tolist() for b in self.batches],
        }
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, sort_keys=True)
        with open(os.path.join(out_dir, "loss_trace.csv"), "w", newline="") as fh:
            fh.write("step,loss\n")
            for s, v in enumerate(self.loss_trace):
                fh.write(f"{s},{v:.17g}\n")
        if self.inputs is not None:
            np.save(os.path.join(out_dir, "train_inputs.npy"), self.inputs)
            np.save(os.path.join(out_dir, "train_targets.npy"), self.targets)

    @classmethod
    def load(cls, out_dir) -> "TrainingPath":
        with open(os.path.join(out_dir, "manifest.json")) as fh:
            manifest = json.load(fh)
        spec = ModelSpec(tuple(manifest["layer_sizes"]))
        n_steps = manifest["n_steps"]
        ck_dir = os.path.join(out_dir, "checkpoints")
        checkpoints = np.stack([
            np.load(os.path.join(ck_dir, f"step_{s:05d}.npy"))
            for s in range(n_steps + 1)
        ])
        loss_trace = np.zeros(n_steps)
        trace_path = os.path.join(out_dir, "loss_trace.csv")
        if os.path.exists(trace_path):
            raw = np.genfromtxt(trace_path, delimiter=",", skip_header=1)
            raw = np.atleast_2d(raw)
            if raw.size:
                loss_trace = raw[:, 1]
        inputs = targets = None
        if os.path.exists(os.path.join(out_dir, "train_inputs.npy")):
            inputs = np.load(os.path.join(out_dir, "train_inputs.npy"))
            targets = np.load(os.path.join(out_dir, "train_targets.npy"))
        return cls(
            spec=spec,
            checkpoints=checkpoints,
            step_sizes=np.asarray(manifest["step_sizes"], dtype=np.float64),
            batches=[np.asarray(b, dtype=np.int64) for b in manifest["batches"]],
            loss_trace=loss_trace,
            loss_kind=manifest["loss_kind"],
            inputs=inputs,
            targets=targets,
            supports_replay=manifest.get("supports_replay", True),
        )


def _batch_plan(n: int, config: TrainConfig, rng: RngState):
    """Yield index arrays per step: full batch, or shuffled chunks re-drawn
    each epoch."""
    if config.batch_size is None:
        full = np.arange(n)
        for _ in range(config.steps):
            yield full
        return
    b = config.batch_size
    per_epoch = max(1, n // b)
    produced = 0
    while produced < config.steps:
        order = rng.permutation(n)
        for c in range(per_epoch):
            if produced >= config.steps:
                return
            yield order[c * b:(c + 1) * b]
            produced += 1


def _loss_and_cgrad(logp, Y, kind):
    """Batch-summed loss and the dL/df rows for the given loss kind."""
    if kind == "cce":
        loss = float(-(Y * logp).sum())
        lprime = -Y
    else:  # mse on the log-probability outputs; diagnostic only
        diff = logp - Y
        loss = 0.5 * float((diff * diff).sum())
        lprime = diff
    return loss, lprime


def _mag_ratio_and_grad(theta, sizes, X, Y, components, method, h_scale=1e-4):
    """Mean manifold-misalignment ratio over the batch and its theta gradient.

    ratio_b = |g_b| / |P g_b| with g_b the input gradient of the loss and P
    the projector onto span(components).  The denominator is floored at 1e-12
    and the ratio capped at 1e6; capped or zero-gradient points contribute no
    gradient.  The analytic path differentiates the ratio exactly through the
    double-backward contraction; "fd" uses central differences on theta.
    """
    C = -Y
    B = X.shape[0]
    g = backend.input_grads(theta, sizes, X, C)
    proj = (g @ components.T) @ components
    gnorm = np.linalg.norm(g, axis=1)
    pnorm = np.linalg.norm(proj, axis=1)
    floored = np.maximum(pnorm, 1e-12)
    ratios = np.minimum(gnorm / floored, 1e6)
    active = (gnorm > 1e-12) & (ratios < 1e6)
    mean_ratio = float(ratios.mean()) if B else 0.0

    if method == "fd":
        def ratio_sum(th):
            gg = backend.input_grads(th, sizes, X, C)
            pp = (gg @ components.T) @ components
            gn = np.linalg.norm(gg, axis=1)
            pn = np.maximum(np.linalg.norm(pp, axis=1), 1e-12)
            return float(np.minimum(gn / pn, 1e6).sum())

        h = h_scale * np.linalg.norm(theta) / np.sqrt(theta.size)
        h = max(h, 1e-8)
        grad = np.zeros_like(theta)
        for j in range(theta.size):
            tp = theta.copy(); tp[j] += h
            tm = theta.copy(); tm[j] -= h
            grad[j] = (ratio_sum(tp) - ratio_sum(tm)) / (2 * h)
        return mean_ratio, grad / B

    # d ratio / d g = g/(|g| |Pg|) - (|g|/|Pg|^3) P g
    U = np.zeros_like(g)
    if np.any(active):
        ga = g[active]
        pa = proj[active]
        gn = gnorm[active][:, None]
        pn = floored[active][:, None]
        U[active] = ga / (gn * pn) - (gn / pn ** 3) * pa
    grad = backend.mixed_grad_theta(theta, sizes, X, C, U)
    return mean_ratio, grad / B


def _run_training(ds: Dataset, spec: ModelSpec, config: TrainConfig,
                  rng: RngState | None) -> TrainingPath:
    config.validate(ds)
    if ds.dim != spec.input_dim or ds.n_classes != spec.n_classes:
        raise InvalidInput("dataset shape does not match model spec")
    rng = rng if rng is not None else RngState(config.seed)
    init_rng = rng.split("init")
    batch_rng = rng.split("batches")
    theta = init_params(spec, init_rng, final_layer_zero=config.final_layer_zero,
                        scale=config.init_scale)
    sizes = spec.layer_sizes
    eps = config.step_sizes()

    X, Y = ds.inputs, ds.one_hot
    adversarial = config.adversarial is not None
    if adversarial:
        from .attack import fgsm_perturb_batch  # local import to avoid a cycle
        adv_rng = rng.split("adv")  # reserved; FGSM itself is deterministic
        del adv_rng
        steps_per_epoch = max(1, ds.n // (config.batch_size or ds.n))

    use_mag = config.mag_alpha > 0.0
    if use_mag:
        if config.mag_components is None:
            raise InvalidInput("mag_alpha > 0 requires mag_components")
        W = np.asarray(config.mag_components, dtype=np.float64)
        if not np.allclose(W @ W.T, np.eye(W.shape[0]), atol=1e-8):
            raise InvalidInput("mag_components rows must be orthonormal")

    checkpoints = np.empty((config.steps + 1, theta.size))
    checkpoints[0] = theta
    batches = []
    losses = np.zeros(config.steps)

    pool_X, pool_Y = X, Y
    for s, batch in enumerate(_batch_plan(ds.n, config, batch_rng)):
        if adversarial and s % steps_per_epoch == 0:
            adv_X = fgsm_perturb_batch(spec, theta, X, Y,
                                       config.adversarial.epsilon)
            pool_X = np.vstack([X, adv_X])
            pool_Y = np.vstack([Y, Y])
        if adversarial:
            # batch indices address the natural set; mirror them onto the
            # regenerated adversarial twin as well
            batch = np.concatenate([batch, batch + ds.n])
        bX, bY = pool_X[batch], pool_Y[batch]

        if config.loss == "cce":
            grad, logp = backend.weighted_grad_sum(theta, sizes, bX, -bY)
            loss = float(-(bY * logp).sum())
        else:
            logp = backend.forward(theta, sizes, bX)
            loss, lprime = _loss_and_cgrad(logp, bY, config.loss)
            grad, _ = backend.weighted_grad_sum(theta, sizes, bX, lprime)

        if use_mag:
            mean_ratio, mag_grad = _mag_ratio_and_grad(
                theta, sizes, bX, bY, W, config.mag_grad_method)
            loss += config.mag_alpha * mean_ratio * len(batch)
            grad = grad + config.mag_alpha * len(batch) * mag_grad

        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            partial = TrainingPath(
                spec=spec, checkpoints=checkpoints[:s + 1].copy(),
                step_sizes=eps[:s], batches=batches, loss_trace=losses[:s],
                loss_kind=config.loss, inputs=X, targets=Y,
                supports_replay=not (adversarial or use_mag))
            raise TrainingDiverged(f"non-finite loss at step {s}", step=s,
                                   partial_path=partial)

        losses[s] = loss
        batches.append(np.asarray(batch, dtype=np.int64))
        theta = theta - eps[s] * grad
        checkpoints[s + 1] = theta

    return TrainingPath(
        spec=spec, checkpoints=checkpoints, step_sizes=eps, batches=batches,
        loss_trace=losses, loss_kind=config.loss, inputs=X, targets=Y,
        supports_replay=not (adversarial or use_mag))


def train(ds: Dataset, spec: ModelSpec, config: TrainConfig,
          rng: RngState | None = None) -> TrainingPath:
    """Plain (batch) gradient descent; every intermediate state checkpointed.

    Deterministic given the seed.  Raises TrainingDiverged (carrying the
    partial path) if the loss goes non-finite.
    """
    if config.mag_alpha != 0.0:
        raise InvalidInput("use train_mag for mag_alpha > 0")
    return _run_training(ds, spec, config, rng)


def train_mag(ds: Dataset, components: np.ndarray, spec: ModelSpec,
              config: TrainConfig, rng: RngState | None = None) -> TrainingPath:
    """Training with the manifold-alignment penalty added to the objective.

    Minimizes sum_b [CCE_b] + alpha * mean_b |g_b|/|P g_b| per batch, where
    g_b is the loss input-gradient and P projects onto span(components).
    With alpha = 0 the path is identical to plain train under the same seed.
    """
    cfg_components = np.asarray(components, dtype=np.float64)
    config.mag_components = cfg_components
    return _run_training(ds, spec, config, rng)


def mag_alignment_metric(spec: ModelSpec, theta: np.ndarray, ds: Dataset,
                         components: np.ndarray):
    """Per-point alignment of loss input-gradients with a linear manifold.

    Returns a dict with ratios (|g|/|Pg|, >= 1, capped at 1e6), cosines
    (|Pg|/|g| in [0, 1]), and the indices of skipped zero-gradient points.
    """
    W = np.asarray(components, dtype=np.float64)
    g = backend.input_grads(theta, spec.layer_sizes, ds.inputs, -ds.one_hot)
    proj = (g @ W.T) @ W
    gnorm = np.linalg.norm(g, axis=1)
    pnorm = np.linalg.norm(proj, axis=1)
    nonzero = gnorm > 1e-12
    ratios = np.full(ds.n, np.nan)
    cosines = np.full(ds.n, np.nan)
    ratios[nonzero] = np.minimum(
        gnorm[nonzero] / np.maximum(pnorm[nonzero], 1e-12), 1e6)
    cosines[nonzero] = pnorm[nonzero] / gnorm[nonzero]
    skipped = np.where(~nonzero)[0]
    return {
        "ratios": ratios,
        "cosines": cosines,
        "skipped": skipped,
        "mean_ratio": float(np.nanmean(ratios)) if nonzero.any() else np.nan,
        "mean_cosine": float(np.nanmean(cosines)) if nonzero.any() else np.nan,
    }
