import numpy as np
import pytest

from bvae.branches import (
    BranchSpec,
    ClassMeanBranch,
    ExactKnn,
    MlpBranch,
    RandomForest,
    SoftKnnBranch,
    fit_exact_knn,
    fit_random_forest,
    make_training_branch,
    soft_knn_probs,
)
from bvae.data import one_hot
from bvae.errors import ConfigError
from bvae.nn.gradcheck import grad_check


class TestBranchSpec:
    def test_round_trip(self):
        spec = BranchSpec("knn", neighbors=25, temperature=0.5)
        assert BranchSpec.from_dict(spec.to_dict()) == spec

    def test_rejects_unknown_kind(self):
        with pytest.raises(ConfigError):
            BranchSpec("svm")

    def test_rejects_bad_neighbors(self):
        with pytest.raises(ConfigError):
            BranchSpec("knn", neighbors=0)


class TestMlpBranch:
    def test_zero_weights_give_uniform_probs(self, rng):
        branch = MlpBranch(2, rng, hidden=(), dtype=np.float64)
        branch.net.layers[-1].params["W"][:] = 0.0
        branch.net.layers[-1].params["b"][:] = 0.0
        out = branch.forward(rng.normal(size=(6, 2)))
        np.testing.assert_allclose(out.probs, 0.1, rtol=1e-12)

    def test_uniform_prediction_loss_is_ln10(self, rng):
        branch = MlpBranch(2, rng, hidden=(), dtype=np.float64)
        branch.net.layers[-1].params["W"][:] = 0.0
        branch.net.layers[-1].params["b"][:] = 0.0
        z = rng.normal(size=(4, 2))
        labels = one_hot(np.array([0, 3, 5, 9]))
        loss, _, _ = branch.loss_and_grads(z, labels, None)
        assert loss == pytest.approx(np.log(10.0), rel=1e-9)

    def test_default_hidden_sizes(self, rng):
        branch = MlpBranch(2, rng)
        widths = [l.params["W"].shape for l in branch.net.layers if hasattr(l, "in_dim")]
        assert widths == [(2, 512), (512, 256), (256, 128), (128, 10)]

    def test_probs_on_simplex(self, rng):
        branch = MlpBranch(3, rng, dtype=np.float64)
        out = branch.forward(rng.normal(size=(5, 3)))
        np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(out.probs >= 0)

    def test_gradients_match_finite_differences(self, rng):
        branch = MlpBranch(2, rng, hidden=(6,), dtype=np.float64)
        z = rng.normal(size=(4, 2))
        labels = one_hot(np.array([1, 2, 3, 4]))
        w = rng.uniform(0.5, 2.0, size=4)
        arrays = [z] + [arr for _, arr in branch.param_items()]

        def loss_and_grads():
            loss, grad_z, _ = branch.loss_and_grads(z, labels, w)
            return loss, [grad_z] + [g for _, g in branch.grad_items()]

        assert grad_check(loss_and_grads, arrays) <= 1e-4


class TestSoftKnnProbs:
    def test_single_context_point(self):
        probs = soft_knn_probs(np.zeros(2), np.array([[1.0, 1.0]]), np.array([3]), 1, 1.0)
        assert probs[3] == pytest.approx(1.0)

    def test_equidistant_neighbors_split_evenly(self):
        context = np.array([[1.0, 0.0], [-1.0, 0.0]])
        labels = np.array([2, 7])
        for tau in (0.01, 1.0, 100.0):
            probs = soft_knn_probs(np.zeros(2), context, labels, 2, tau)
            assert probs[2] == pytest.approx(0.5)
            assert probs[7] == pytest.approx(0.5)

    def test_small_temperature_approaches_hard_1nn(self, rng):
        context = rng.normal(size=(20, 2))
        labels = rng.integers(0, 10, size=20)
        q = rng.normal(size=2)
        d2 = ((context - q) ** 2).sum(axis=1)
        hard = labels[np.argmin(d2)]
        probs = soft_knn_probs(q, context, labels, 5, tau=1e-4)
        assert probs.argmax() == hard
        assert probs[hard] == pytest.approx(1.0, abs=1e-6)

    def test_translation_invariance(self, rng):
        context = rng.normal(size=(8, 3))
        labels = rng.integers(0, 10, size=8)
        q = rng.normal(size=3)
        shift = rng.normal(size=3) * 10
        a = soft_knn_probs(q, context, labels, 4, 0.7)
        b = soft_knn_probs(q + shift, context + shift, labels, 4, 0.7)
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_empty_context_rejected(self):
        with pytest.raises(ConfigError):
            soft_knn_probs(np.zeros(2), np.zeros((0, 2)), np.array([]), 1, 1.0)

    def test_context_smaller_than_k_rejected(self):
        with pytest.raises(ConfigError):
            soft_knn_probs(np.zeros(2), np.ones((3, 2)), np.array([1, 2, 3]), 4, 1.0)


class TestSoftKnnBranch:
    def test_pure_class_context_is_certain(self):
        z = np.array([[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [0.1, 0.1]])
        labels = np.array([4, 4, 4, 4])
        out = SoftKnnBranch(3, 1.0).forward(z, labels)
        np.testing.assert_allclose(out.probs[:, 4], 1.0)

    def test_perfect_prediction_zero_loss_zero_grad(self):
        z = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]])
        labels = np.array([1, 1, 2, 2])
        loss, grad_z, out = SoftKnnBranch(1, 1.0).loss_and_grads(
            z, one_hot(labels), None)
        assert loss == pytest.approx(0.0, abs=1e-9)
        np.testing.assert_allclose(grad_z, 0.0, atol=1e-9)
        np.testing.assert_allclose(out.probs[np.arange(4), labels], 1.0)

    def test_batch_smaller_than_k_rejected(self):
        with pytest.raises(ConfigError):
            SoftKnnBranch(5, 1.0).forward(np.zeros((4, 2)), np.zeros(4, dtype=int))

    def test_grad_z_matches_finite_differences_six_points(self, rng):
        z = np.array([[0.0, 0.0], [1.0, 0.2], [0.3, 1.1], [-0.8, 0.5],
                      [0.9, -0.7], [-0.4, -1.0]])
        labels = np.array([0, 1, 0, 2, 1, 2])
        w = rng.uniform(0.5, 2.0, size=6)
        branch = SoftKnnBranch(3, 0.8)

        def loss_and_grads():
            loss, grad_z, _ = branch.loss_and_grads(z, one_hot(labels), w)
            return loss, [grad_z]

        assert grad_check(loss_and_grads, [z]) <= 1e-4

    def test_weight_scaling_linearity(self, rng):
        z = rng.normal(size=(8, 2))
        labels = rng.integers(0, 10, size=8)
        branch = SoftKnnBranch(3, 1.0)
        base, _, _ = branch.loss_and_grads(z, one_hot(labels), None)
        scaled, _, _ = branch.loss_and_grads(z, one_hot(labels), np.full(8, 2.5))
        assert scaled == pytest.approx(2.5 * base, rel=1e-6)

    def test_agrees_with_exact_knn_at_small_temperature(self, rng):
        # small tau concentrates the vote on the nearest neighbor, so soft
        # and exact kNN coincide wherever neighborhoods are locally pure
        centers = rng.normal(scale=12, size=(10, 2))
        z = np.concatenate([c + 0.2 * rng.normal(size=(6, 2)) for c in centers])
        labels = np.repeat(np.arange(10), 6)
        branch = SoftKnnBranch(5, 1e-3)
        soft_pred = branch.forward(z, labels).probs.argmax(axis=1)
        hard_pred = np.empty(len(z), dtype=int)
        for i in range(len(z)):
            others = np.delete(np.arange(len(z)), i)
            exact = ExactKnn(z[others], labels[others], 5)
            hard_pred[i] = exact.predict(z[i:i + 1])[0]
        np.testing.assert_array_equal(soft_pred, hard_pred)

    def test_large_temperature_recovers_vote_fractions(self, rng):
        # tau -> inf flattens the softmax: probabilities become the exact
        # vote fractions over the same neighbor set
        z = rng.normal(size=(30, 2))
        labels = rng.integers(0, 10, size=30)
        soft = SoftKnnBranch(7, 1e8).forward(z, labels).probs
        for i in range(30):
            others = np.delete(np.arange(30), i)
            exact = ExactKnn(z[others], labels[others], 7)
            np.testing.assert_allclose(soft[i], exact.predict_probs(z[i:i + 1])[0],
                                       atol=1e-6)


class TestClassMeanBranch:
    def test_first_update_sets_centroid(self):
        branch = ClassMeanBranch(2, temperature=1.0, dtype=np.float64)
        z = np.array([[1.0, 1.0], [3.0, 3.0], [0.0, -2.0]])
        labels = np.array([1, 1, 4])
        branch.update_centroids(z, labels)
        np.testing.assert_allclose(branch.centroids[1], [2.0, 2.0])
        np.testing.assert_allclose(branch.centroids[4], [0.0, -2.0])
        assert branch.seen[1] and branch.seen[4] and not branch.seen[0]

    def test_momentum_update(self):
        branch = ClassMeanBranch(2, temperature=1.0, dtype=np.float64)
        branch.update_centroids(np.array([[0.0, 0.0]]), np.array([3]))
        branch.update_centroids(np.array([[10.0, 0.0]]), np.array([3]))
        np.testing.assert_allclose(branch.centroids[3], [1.0, 0.0])

    def test_probs_on_simplex_and_nearest_wins(self, rng):
        branch = ClassMeanBranch(2, temperature=0.1, dtype=np.float64)
        codes = rng.normal(size=(10, 2)) * 5
        branch.update_centroids(codes, np.arange(10))
        out = branch.forward(codes)
        np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_array_equal(out.probs.argmax(axis=1), np.arange(10))

    def test_grad_z_matches_finite_differences(self, rng):
        branch = ClassMeanBranch(2, temperature=0.8, dtype=np.float64)
        branch.update_centroids(rng.normal(size=(12, 2)),
                                np.repeat(np.arange(4), 3))
        z = rng.normal(size=(5, 2))
        labels = one_hot(rng.integers(0, 4, size=5))
        w = rng.uniform(0.5, 2.0, size=5)

        def loss_and_grads():
            loss, grad_z, _ = branch.loss_and_grads(z, labels, w)
            return loss, [grad_z]

        assert grad_check(loss_and_grads, [z]) <= 1e-4

    def test_aux_state_round_trip(self, rng):
        branch = ClassMeanBranch(2)
        branch.update_centroids(rng.normal(size=(6, 2)).astype(np.float32),
                                np.array([0, 0, 1, 1, 2, 2]))
        blocks = {name: arr.copy() for name, arr in branch.aux_state_items()}
        other = ClassMeanBranch(2)
        other.load_aux_state(blocks)
        np.testing.assert_array_equal(other.centroids, branch.centroids)
        np.testing.assert_array_equal(other.seen, branch.seen)


class TestExactKnn:
    def test_n1_memorizes_training_points(self, rng):
        z = rng.normal(size=(50, 2))
        labels = rng.integers(0, 10, size=50)
        clf = fit_exact_knn(z, labels, 1)
        np.testing.assert_array_equal(clf.predict(z), labels)

    def test_matches_brute_force_oracle(self, rng):
        train = rng.normal(size=(200, 3))
        labels = rng.integers(0, 10, size=200)
        queries = rng.normal(size=(40, 3))
        for n in (1, 5, 17):
            clf = fit_exact_knn(train, labels, n)
            got = clf.predict(queries)
            for qi, q in enumerate(queries):
                d = np.sqrt(((train - q) ** 2).sum(axis=1))
                nearest = np.argsort(d, kind="stable")[:n]
                counts = np.bincount(labels[nearest], minlength=10)
                best = counts.max()
                want = min(c for c in range(10) if counts[c] == best)
                assert got[qi] == want

    def test_supported_neighbor_grid(self, rng):
        z = rng.normal(size=(100, 2))
        labels = rng.integers(0, 10, size=100)
        for n in range(5, 55, 5):
            clf = fit_exact_knn(z, labels, n)
            probs = clf.predict_probs(z[:3])
            np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_probs_are_vote_fractions(self):
        z = np.array([[0.0], [0.1], [0.2], [10.0]])
        labels = np.array([5, 5, 1, 7])
        clf = fit_exact_knn(z, labels, 3)
        probs = clf.predict_probs(np.array([[0.05]]))
        assert probs[0, 5] == pytest.approx(2 / 3)
        assert probs[0, 1] == pytest.approx(1 / 3)

    def test_tie_goes_to_lowest_class(self):
        z = np.array([[0.0], [1.0]])
        labels = np.array([8, 2])
        clf = fit_exact_knn(z, labels, 2)
        assert clf.predict(np.array([[0.5]]))[0] == 2

    def test_bad_n(self, rng):
        with pytest.raises(ConfigError):
            fit_exact_knn(rng.normal(size=(5, 2)), np.zeros(5, dtype=int), 6)


class TestRandomForest:
    def test_single_class_training_set(self, rng):
        z = rng.normal(size=(30, 2))
        forest = fit_random_forest(z, np.full(30, 6), n_estimators=5, seed=0)
        np.testing.assert_array_equal(forest.predict(rng.normal(size=(10, 2))), 6)

    def test_threshold_separable_stump(self, rng):
        z = np.concatenate([rng.uniform(0, 0.4, size=(30, 1)),
                            rng.uniform(0.6, 1.0, size=(30, 1))])
        labels = np.array([0] * 30 + [1] * 30)
        forest = fit_random_forest(z, labels, n_estimators=7, max_depth=1, seed=3)
        assert np.mean(forest.predict(z) == labels) == 1.0

    def test_same_seed_same_forest(self, rng):
        z = rng.normal(size=(60, 2))
        labels = rng.integers(0, 10, size=60)
        queries = rng.normal(size=(20, 2))
        a = fit_random_forest(z, labels, n_estimators=10, seed=5).predict_probs(queries)
        b = fit_random_forest(z, labels, n_estimators=10, seed=5).predict_probs(queries)
        np.testing.assert_array_equal(a, b)
        c = fit_random_forest(z, labels, n_estimators=10, seed=6).predict_probs(queries)
        assert not np.array_equal(a, c)

    def test_probs_on_simplex(self, rng):
        z = rng.normal(size=(80, 3))
        labels = rng.integers(0, 10, size=80)
        forest = fit_random_forest(z, labels, n_estimators=8, seed=1)
        probs = forest.predict_probs(rng.normal(size=(15, 3)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(probs >= 0)

    def test_single_sample_degenerates_to_leaf(self):
        forest = fit_random_forest(np.zeros((1, 2)), np.array([4]), n_estimators=3, seed=0)
        np.testing.assert_array_equal(forest.predict(np.ones((5, 2))), 4)

    def test_learns_blobs(self, rng):
        centers = rng.normal(scale=10, size=(4, 2))
        z = np.concatenate([c + 0.3 * rng.normal(size=(25, 2)) for c in centers])
        labels = np.repeat(np.arange(4), 25)
        forest = fit_random_forest(z, labels, n_estimators=15, max_depth=6, seed=2)
        assert np.mean(forest.predict(z) == labels) > 0.97


class TestWiring:
    def test_make_training_branch_kinds(self, rng):
        assert make_training_branch(None, 2, rng) is None
        assert isinstance(make_training_branch(BranchSpec("mlp"), 2, rng), MlpBranch)
        assert isinstance(make_training_branch(BranchSpec("linear"), 2, rng), MlpBranch)
        assert isinstance(make_training_branch(BranchSpec("knn"), 2, rng), SoftKnnBranch)
        assert isinstance(make_training_branch(BranchSpec("rf"), 2, rng), ClassMeanBranch)

    def test_linear_branch_has_single_layer(self, rng):
        branch = make_training_branch(BranchSpec("linear"), 2, rng)
        dense = [l for l in branch.net.layers if hasattr(l, "in_dim")]
        assert len(dense) == 1
        assert dense[0].params["W"].shape == (2, 10)
