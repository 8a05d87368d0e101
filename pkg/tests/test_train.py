"""Training paths: checkpointing, replay exactness, MAG objective."""

import numpy as np
import pytest

from epkit import backend
from epkit.data import toy_three_gaussians
from epkit.errors import InvalidInput, TrainingDiverged
from epkit.model import ModelSpec, forward_batch
from epkit.numerics import RngState, pca_fit
from epkit.train import (AdvTrainConfig, TrainConfig, TrainingPath,
                         mag_alignment_metric, train, train_mag)


def small_problem(seed=0, dim=16, per_class=30):
    ds = toy_three_gaussians(RngState(seed), dim=dim, per_class=per_class)
    spec = ModelSpec((dim, 12, 3))
    return ds, spec


class TestTrain:
    def test_zero_steps_single_checkpoint(self):
        ds, spec = small_problem()
        path = train(ds, spec, TrainConfig(steps=0, lr=1e-3, seed=1))
        assert path.n_steps == 0
        assert path.checkpoints.shape[0] == 1
        logp = forward_batch(spec, path.final_theta, ds.inputs[:5])
        np.testing.assert_allclose(logp, np.log(1 / 3), atol=1e-12)

    def test_replay_exact(self):
        ds, spec = small_problem(1)
        path = train(ds, spec, TrainConfig(steps=25, lr=1e-3, seed=2))
        assert path.max_replay_error() <= 1e-12

    def test_replay_exact_minibatch(self):
        ds, spec = small_problem(2)
        path = train(ds, spec, TrainConfig(steps=20, lr=1e-3, batch_size=16,
                                           seed=3))
        assert len(path.batches) == 20
        assert all(len(b) == 16 for b in path.batches)
        assert path.max_replay_error() <= 1e-12

    def test_deterministic_given_seed(self):
        ds, spec = small_problem(3)
        cfg = TrainConfig(steps=15, lr=1e-3, batch_size=10, seed=7)
        a = train(ds, spec, cfg)
        b = train(ds, spec, TrainConfig(steps=15, lr=1e-3, batch_size=10, seed=7))
        np.testing.assert_array_equal(a.checkpoints, b.checkpoints)

    def test_toy_training_reaches_accuracy(self):
        ds = toy_three_gaussians(RngState(5), dim=50, per_class=200)
        spec = ModelSpec((50, 32, 3))
        path = train(ds, spec, TrainConfig(steps=200, lr=2e-4, seed=4))
        preds = np.argmax(
            forward_batch(spec, path.final_theta, ds.inputs), axis=1)
        assert np.mean(preds == ds.labels) >= 0.95

    def test_divergence_reported_with_last_good_step(self):
        ds, spec = small_problem(6)
        with pytest.raises(TrainingDiverged) as err:
            train(ds, spec, TrainConfig(steps=60, lr=1e6, seed=5))
        assert err.value.step >= 1
        partial = err.value.partial_path
        assert partial is not None
        assert np.all(np.isfinite(partial.checkpoints))

    def test_loss_trace_decreases(self):
        ds, spec = small_problem(7)
        path = train(ds, spec, TrainConfig(steps=60, lr=1e-3, seed=6))
        assert path.loss_trace[-1] < path.loss_trace[0]

    def test_variable_step_schedule(self):
        ds, spec = small_problem(8)
        schedule = np.linspace(2e-3, 1e-4, 10)
        path = train(ds, spec, TrainConfig(steps=10, lr=schedule, seed=7))
        np.testing.assert_array_equal(path.step_sizes, schedule)
        assert path.max_replay_error() <= 1e-12

    def test_save_load_roundtrip(self, tmp_path):
        ds, spec = small_problem(9)
        path = train(ds, spec, TrainConfig(steps=8, lr=1e-3, batch_size=13,
                                           seed=8))
        path.save(tmp_path / "run")
        back = TrainingPath.load(tmp_path / "run")
        np.testing.assert_array_equal(back.checkpoints, path.checkpoints)
        np.testing.assert_array_equal(back.step_sizes, path.step_sizes)
        for a, b in zip(back.batches, path.batches):
            np.testing.assert_array_equal(a, b)
        assert back.max_replay_error() <= 1e-12

    def test_adversarial_training_runs(self):
        ds, spec = small_problem(10)
        cfg = TrainConfig(steps=6, lr=1e-4, seed=9,
                          adversarial=AdvTrainConfig(epsilon=0.05))
        path = train(ds, spec, cfg)
        assert path.n_steps == 6
        assert not path.supports_replay
        assert len(path.batches[0]) == 2 * ds.n  # natural plus regenerated twin


class TestMag:
    def test_alpha_zero_matches_plain_train(self):
        ds, spec = small_problem(11)
        w = pca_fit(ds.inputs, 5)
        plain = train(ds, spec, TrainConfig(steps=12, lr=1e-3, seed=10))
        magged = train_mag(ds, w, spec,
                           TrainConfig(steps=12, lr=1e-3, seed=10, mag_alpha=0.0))
        np.testing.assert_array_equal(plain.checkpoints, magged.checkpoints)

    def test_requires_orthonormal_components(self):
        ds, spec = small_problem(12)
        with pytest.raises(InvalidInput):
            train_mag(ds, np.ones((2, ds.dim)), spec,
                      TrainConfig(steps=2, lr=1e-3, mag_alpha=0.1))

    def test_analytic_gradient_matches_fd(self):
        # the analytic double-backward ratio gradient equals the
        # finite-difference one the documented fallback uses
        ds = toy_three_gaussians(RngState(13), dim=6, per_class=5)
        spec = ModelSpec((6, 5, 3))
        w = pca_fit(ds.inputs, 3)
        cfg_a = TrainConfig(steps=3, lr=1e-3, seed=11, mag_alpha=0.3,
                            mag_grad_method="analytic")
        cfg_f = TrainConfig(steps=3, lr=1e-3, seed=11, mag_alpha=0.3,
                            mag_grad_method="fd")
        pa = train_mag(ds, w, spec, cfg_a)
        pf = train_mag(ds, w, spec, cfg_f)
        denom = np.max(np.abs(pf.checkpoints[-1]))
        assert np.max(np.abs(pa.checkpoints[-1] - pf.checkpoints[-1])) \
            <= 1e-5 * denom

    def test_mag_improves_alignment(self):
        ds = toy_three_gaussians(RngState(14), dim=12, per_class=60)
        w = pca_fit(ds.inputs, 4)
        from epkit.data import project_dataset
        ds_proj = project_dataset(ds, w)
        spec = ModelSpec((12, 10, 3))
        base = train(ds_proj, spec, TrainConfig(steps=80, lr=1e-3, seed=12))
        magged = train_mag(ds_proj, w, spec,
                           TrainConfig(steps=80, lr=1e-3, seed=12, mag_alpha=1.0))
        stats_b = mag_alignment_metric(spec, base.final_theta, ds_proj, w)
        stats_m = mag_alignment_metric(spec, magged.final_theta, ds_proj, w)
        assert stats_m["mean_cosine"] > stats_b["mean_cosine"]


class TestMagMetric:
    def test_gradient_in_span(self):
        # a linear model whose rows live in span(W) has perfectly aligned
        # input gradients
        dim, k = 8, 3
        w = pca_fit(RngState(15).normal(size=(40, dim)), k)
        spec = ModelSpec((dim, 2))
        wrows = np.vstack([w[0], -w[0]])
        theta = backend.pack([(wrows, np.zeros(2))], spec.layer_sizes)
        ds = toy_three_gaussians(RngState(16), dim=dim, per_class=4)
        from epkit.data import Dataset
        ds2 = Dataset(ds.inputs, (ds.labels % 2), np.eye(2)[(ds.labels % 2)])
        stats = mag_alignment_metric(spec, theta, ds2, w)
        np.testing.assert_allclose(stats["ratios"], 1.0, atol=1e-10)
        np.testing.assert_allclose(stats["cosines"], 1.0, atol=1e-10)

    def test_gradient_orthogonal_to_span_clamped(self):
        dim = 6
        w = np.eye(dim)[:2]  # span of first two axes
        spec = ModelSpec((dim, 2))
        row = np.zeros(dim)
        row[-1] = 1.0  # gradient along the last axis, orthogonal to span
        theta = backend.pack([(np.vstack([row, -row]), np.zeros(2))],
                             spec.layer_sizes)
        from epkit.data import make_dataset
        ds = make_dataset(RngState(17).normal(size=(5, dim)), [0, 1, 0, 1, 0])
        stats = mag_alignment_metric(spec, theta, ds, w)
        assert np.all(stats["ratios"][np.isfinite(stats["ratios"])] == 1e6)

    def test_random_projector_oracle(self):
        dim, k = 10, 5
        w = pca_fit(RngState(18).normal(size=(60, dim)), k)
        proj = w.T @ w
        ds = toy_three_gaussians(RngState(19), dim=dim, per_class=10)
        spec = ModelSpec((dim, 8, 3))
        from epkit.model import init_params
        theta = init_params(spec, RngState(20))
        stats = mag_alignment_metric(spec, theta, ds, w)
        g = backend.input_grads(theta, spec.layer_sizes, ds.inputs,
                                -ds.one_hot)
        for i in range(ds.n):
            direct = np.linalg.norm(g[i]) / np.linalg.norm(proj @ g[i])
            assert abs(stats["ratios"][i] - direct) <= 1e-10 * direct

    def test_ratio_at_least_one(self):
        ds, spec = small_problem(21)
        from epkit.model import init_params
        theta = init_params(spec, RngState(22))
        w = pca_fit(ds.inputs, 6)
        stats = mag_alignment_metric(spec, theta, ds, w)
        finite = stats["ratios"][np.isfinite(stats["ratios"])]
        assert np.all(finite >= 1.0 - 1e-12)
