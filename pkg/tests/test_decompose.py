"""Gradient-basis OOD scores, input-sensitivity matrices, signal spectra."""

import numpy as np
import pytest

from epkit import backend
from epkit.data import Dataset, toy_three_gaussians
from epkit.decompose import (GradientBasis, auroc, cross_model_alignment,
                             input_grad_matrix, ood_score, ood_scores,
                             signal_dimension,
                             training_grad_basis)
from epkit.errors import InvalidInput
from epkit.model import ModelSpec, forward_batch
from epkit.numerics import RngState
from epkit.pathkernel import EpkConfig, epk_predict
from epkit.train import TrainConfig, train


@pytest.fixture(scope="module")
def toy_setup():
    ds = toy_three_gaussians(RngState(70), dim=12, per_class=60)
    spec = ModelSpec((12, 10, 3))
    path = train(ds, spec, TrainConfig(steps=80, lr=8e-4, seed=71))
    return ds, spec, path


class TestBasis:
    def test_single_point_single_step_rank_one(self):
        ds = toy_three_gaussians(RngState(72), dim=6, per_class=1)
        one = Dataset(ds.inputs[:1], ds.labels[:1] * 0, np.eye(3)[[0]],
                      name="one")
        spec = ModelSpec((6, 4, 3))
        path = train(one, spec, TrainConfig(steps=1, lr=1e-3, seed=73))
        basis = training_grad_basis(path, steps=(0,), threshold=0.95)
        assert basis.rank == 1
        grad = backend.weighted_param_grads(
            path.theta(0), spec.layer_sizes, one.inputs, -one.one_hot)[0]
        cos = abs(float(basis.vt[0] @ grad)) / np.linalg.norm(grad)
        assert abs(cos - 1.0) <= 1e-10

    def test_rows_orthonormal(self, toy_setup):
        _, _, path = toy_setup
        basis = training_grad_basis(path, steps="final")
        gram = basis.vt @ basis.vt.T
        assert np.abs(gram - np.eye(basis.rank)).max() <= 1e-8

    def test_rank_shrinks_over_training(self):
        # gradients concentrate as the model trains, so the 95% rank at the
        # final checkpoint drops below the randomly initialized start (a
        # zeroed final layer would instead pin the start to rank <= K + 1)
        ds = toy_three_gaussians(RngState(92), dim=12, per_class=60)
        spec = ModelSpec((12, 10, 3))
        path = train(ds, spec, TrainConfig(steps=120, lr=8e-4, seed=93,
                                           final_layer_zero=False))
        early = training_grad_basis(path, steps=(0,))
        late = training_grad_basis(path, steps=(path.n_steps,))
        assert late.rank < early.rank

    def test_empty_selection_rejected(self, toy_setup):
        _, _, path = toy_setup
        with pytest.raises(InvalidInput):
            training_grad_basis(path, steps=())

    def test_save_load_roundtrip(self, toy_setup, tmp_path):
        _, _, path = toy_setup
        basis = training_grad_basis(path)
        basis.save(tmp_path / "basis.npz")
        back = GradientBasis.load(tmp_path / "basis.npz")
        np.testing.assert_array_equal(back.vt, basis.vt)
        assert back.source_steps == basis.source_steps


class TestOodScore:
    def test_in_span_scores_zero(self, toy_setup):
        _, _, path = toy_setup
        basis = training_grad_basis(path)
        g = basis.vt.T @ RngState(74).normal(size=basis.rank)
        proj, resid, score = ood_score(basis, g)
        assert score <= 1e-10
        assert resid <= 1e-10 * proj

    def test_orthogonal_scores_one(self, toy_setup):
        _, _, path = toy_setup
        basis = training_grad_basis(path)
        g = RngState(75).normal(size=basis.vt.shape[1])
        g -= basis.vt.T @ (basis.vt @ g)
        _, _, score = ood_score(basis, g)
        assert abs(score - 1.0) <= 1e-10

    def test_zero_gradient_flagged(self, toy_setup):
        _, _, path = toy_setup
        basis = training_grad_basis(path)
        _, _, score = ood_score(basis, np.zeros(basis.vt.shape[1]))
        assert score is None

    def test_monotone_under_basis_enlargement(self, toy_setup):
        _, _, path = toy_setup
        small = training_grad_basis(path, threshold=0.7)
        large = training_grad_basis(path, threshold=0.999)
        assert large.rank >= small.rank
        for seed in range(5):
            g = RngState(200 + seed).normal(size=small.vt.shape[1])
            assert ood_score(large, g)[2] <= ood_score(small, g)[2] + 1e-12

    def test_id_vs_shifted_ood_auroc(self, toy_setup):
        ds, spec, path = toy_setup
        basis = training_grad_basis(path)
        id_test = toy_three_gaussians(RngState(76), dim=12, per_class=40).inputs
        ood = RngState(77).normal(size=(120, 12)) - 5.0
        s_id = ood_scores(path, basis, id_test)
        s_ood = ood_scores(path, basis, ood)
        assert auroc(s_id, s_ood) >= 0.8

    def test_spanning_theorem_operational(self, toy_setup):
        # a test-gradient perturbation orthogonal to the full training
        # gradient span leaves every step's learned adjustment unchanged
        ds, spec, path = toy_setup
        full = training_grad_basis(path, steps="all", threshold=1.0)
        g_perp = RngState(78).normal(size=full.vt.shape[1])
        g_perp -= full.vt.T @ (full.vt @ g_perp)
        for s in range(0, path.n_steps, 7):
            assert abs(float(g_perp @ path.delta(s))) <= 1e-10 * \
                max(np.linalg.norm(path.delta(s)), 1e-30)


class TestInputGradMatrix:
    def test_zero_steps_zero_matrix(self):
        ds = toy_three_gaussians(RngState(79), dim=5, per_class=4)
        spec = ModelSpec((5, 4, 3))
        path = train(ds, spec, TrainConfig(steps=0, lr=1e-3, seed=80))
        G, contrib = input_grad_matrix(path, ds.inputs[0],
                                       EpkConfig(substeps=2,
                                                 class_reduction="class-sum"))
        np.testing.assert_allclose(G, 0.0, atol=0)
        np.testing.assert_allclose(contrib, 0.0, atol=0)

    def test_contributions_reproduce_learned_adjustment(self, toy_setup):
        ds, spec, path = toy_setup
        x = ds.inputs[7]
        cfg = EpkConfig(substeps=12)
        _, contrib = input_grad_matrix(path, x, cfg)
        adj = epk_predict(path, x[None, :], cfg)[0] - \
            forward_batch(spec, path.theta(0), x[None, :])[0]
        np.testing.assert_allclose(contrib.sum(axis=0), adj, atol=1e-8)

    def test_retraining_oracle_micro_problem(self):
        # perturb one training input, retrain identically, compare the
        # per-class prediction change on a 2-step, 5-ish-point problem
        ds = toy_three_gaussians(RngState(81), dim=5, per_class=3)
        spec = ModelSpec((5, 6, 3))
        cfg_t = TrainConfig(steps=2, lr=1e-4, seed=82)
        path = train(ds, spec, cfg_t)
        x_test = RngState(83).normal(size=5) + 2.0
        G, _ = input_grad_matrix(path, x_test,
                                 EpkConfig(substeps=600, rule="midpoint",
                                           class_reduction="full"))
        j, h = 4, 1e-4
        for k in range(3):
            def run(p, offset):
                inputs = ds.inputs.copy()
                inputs[j, p] += offset
                d2 = Dataset(inputs, ds.labels, ds.one_hot)
                pth = train(d2, spec, cfg_t)
                return forward_batch(spec, pth.final_theta,
                                     x_test[None, :])[0, k]
            fd = np.array([(run(p, h) - run(p, -h)) / (2 * h)
                           for p in range(5)])
            rel = np.linalg.norm(fd - G[k][j]) / np.linalg.norm(fd)
            assert rel <= 0.05


class TestSignalDimension:
    def test_rank_one_matrix(self):
        G = np.outer(np.arange(1.0, 7.0), np.array([1.0, -2.0, 0.5]))
        spectrum = signal_dimension(G)
        assert spectrum.n95 == 1

    def test_cdf_monotone_to_one(self, toy_setup):
        ds, spec, path = toy_setup
        G, _ = input_grad_matrix(path, ds.inputs[0],
                                 EpkConfig(substeps=4,
                                           class_reduction="class-sum"))
        spectrum = signal_dimension(G)
        assert np.all(np.diff(spectrum.cdf) >= -1e-15)
        assert abs(spectrum.cdf[-1] - 1.0) <= 1e-12
        assert spectrum.n95 <= len(spectrum.singular_values)

    def test_rotation_invariance(self, toy_setup):
        # rotating data and first-layer weights together leaves the model,
        # hence the spectrum, unchanged
        ds, spec, path = toy_setup
        cfg = EpkConfig(substeps=4, class_reduction="class-sum")
        G, _ = input_grad_matrix(path, ds.inputs[1], cfg)
        q, _ = np.linalg.qr(RngState(84).normal(size=(ds.dim, ds.dim)))
        rotated_ckpts = np.empty_like(path.checkpoints)
        for s in range(path.checkpoints.shape[0]):
            layers = backend.unpack(path.checkpoints[s].copy(),
                                    spec.layer_sizes)
            layers = [(layers[0][0] @ q.T, layers[0][1])] + layers[1:]
            rotated_ckpts[s] = backend.pack(layers, spec.layer_sizes)
        from epkit.train import TrainingPath
        path_r = TrainingPath(
            spec=spec, checkpoints=rotated_ckpts,
            step_sizes=path.step_sizes, batches=path.batches,
            loss_trace=path.loss_trace, loss_kind=path.loss_kind,
            inputs=ds.inputs @ q.T, targets=ds.one_hot)
        G_r, _ = input_grad_matrix(path_r, q @ ds.inputs[1], cfg)
        s_a = signal_dimension(G).singular_values
        s_b = signal_dimension(G_r).singular_values
        np.testing.assert_allclose(s_a, s_b, atol=1e-8 * s_a[0])

    def test_zero_matrix_rejected(self):
        with pytest.raises(InvalidInput):
            signal_dimension(np.zeros((4, 3)))


class TestCrossModelAlignment:
    def test_identical_models_full_overlap(self, toy_setup):
        ds, spec, path = toy_setup
        G, _ = input_grad_matrix(path, ds.inputs[2],
                                 EpkConfig(substeps=4,
                                           class_reduction="class-sum"))
        out = cross_model_alignment(G, G)
        np.testing.assert_allclose(
            out["component_overlap"][:out["n_components"]], 1.0, atol=1e-8)

    def test_random_matrices_chance_overlap(self):
        d = 784
        G_a = RngState(85).normal(size=(60, d))
        G_b = RngState(86).normal(size=(60, d))
        out = cross_model_alignment(G_a, G_b, n_components=10)
        # expected squared projection of a random unit vector: r/d
        chance = 10 / d
        lead = out["component_overlap"][0]
        assert lead <= 12 * chance  # same order as chance, far from 1

    def test_seed_different_toy_models_share_modes(self):
        ds = toy_three_gaussians(RngState(87), dim=12, per_class=60)
        spec = ModelSpec((12, 10, 3))
        cfg = EpkConfig(substeps=4, class_reduction="class-sum")
        x = ds.inputs[0]
        overlaps = []
        path_a = train(ds, spec, TrainConfig(steps=80, lr=8e-4, seed=90))
        path_b = train(ds, spec, TrainConfig(steps=80, lr=8e-4, seed=91))
        G_a, _ = input_grad_matrix(path_a, x, cfg)
        G_b, _ = input_grad_matrix(path_b, x, cfg)
        out = cross_model_alignment(G_a, G_b, n_components=3)
        top3 = out["component_overlap"][:3]
        chance = 3 / 12
        assert np.all(top3 > chance)
        assert top3.mean() > 1.5 * chance


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.1, 0.2], [0.8, 0.9]) == 1.0

    def test_chance_level(self):
        rng = RngState(88)
        a = rng.normal(size=2000)
        b = rng.normal(size=2000)
        assert abs(auroc(a, b) - 0.5) <= 0.05

    def test_ties_average(self):
        assert abs(auroc([0.5, 0.5], [0.5, 0.5]) - 0.5) <= 1e-12
