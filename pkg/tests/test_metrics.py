import numpy as np
import pytest

from bvae.errors import ConfigError, ShapeError, ValidationError
from bvae.metrics import (
    acc,
    ari,
    confusion_matrix,
    contingency_table,
    hungarian,
    kmeans,
    lloyd_single_run,
    mutual_information,
    nmi,
    pair_counts,
)
from bvae.rng import substream

from oracles import (
    acc_by_enumeration,
    ari_by_pair_counting,
    best_assignment_by_enumeration,
    entropy_nats,
    mutual_information_nats,
    wcss_of,
)


class TestKmeans:
    def test_n_equals_k_distinct_points(self, rng):
        points = rng.normal(scale=10, size=(6, 2))
        part = kmeans(points, k=6, restarts=3, seed=0)
        assert part.wcss == pytest.approx(0.0, abs=1e-12)
        assert len(set(part.assignments.tolist())) == 6

    def test_two_groups_on_a_line(self):
        points = np.array([[0.0], [0.1], [10.0], [10.1]])
        part = kmeans(points, k=2, restarts=5, seed=0)
        got = sorted(part.centroids.ravel().tolist())
        assert got == pytest.approx([0.05, 10.05])

    def test_recovers_tight_blobs(self, rng):
        centers = np.array([[0.0, 0.0], [50.0, 0.0], [0.0, 50.0]])
        points = np.concatenate([c + 0.5 * rng.normal(size=(20, 2)) for c in centers])
        truth = np.repeat(np.arange(3), 20)
        part = kmeans(points, k=3, restarts=5, seed=1)
        assert acc(truth, part.assignments) == 1.0

    def test_wcss_non_increasing_within_run(self, rng):
        points = rng.normal(size=(120, 3))
        for r in range(5):
            run = lloyd_single_run(points, 7, substream(3, "kmeans", r))
            diffs = np.diff(run.wcss_history)
            assert np.all(diffs <= 1e-9)

    def test_best_of_restarts_by_wcss(self, rng):
        points = rng.normal(size=(60, 2))
        best = kmeans(points, k=5, restarts=8, seed=4)
        singles = [lloyd_single_run(points, 5, substream(4, "kmeans", r)).wcss
                   for r in range(8)]
        assert best.wcss == pytest.approx(min(singles))

    def test_reported_wcss_matches_oracle(self, rng):
        points = rng.normal(size=(40, 2))
        part = kmeans(points, k=4, restarts=3, seed=2)
        assert part.wcss == pytest.approx(
            wcss_of(points, part.assignments, part.centroids), rel=1e-10)

    def test_every_cluster_is_used(self, rng):
        points = rng.normal(size=(50, 2))
        part = kmeans(points, k=10, restarts=3, seed=5)
        assert set(part.assignments.tolist()) == set(range(10))

    def test_determinism_per_seed(self, rng):
        points = rng.normal(size=(80, 2))
        a = kmeans(points, k=4, seed=7)
        b = kmeans(points, k=4, seed=7)
        np.testing.assert_array_equal(a.assignments, b.assignments)

    def test_too_few_points(self, rng):
        with pytest.raises(ConfigError):
            kmeans(rng.normal(size=(3, 2)), k=5)


class TestHungarian:
    def test_zero_diagonal_identity(self):
        cost = np.ones((4, 4)) - np.eye(4)
        np.testing.assert_array_equal(hungarian(cost), np.arange(4))

    def test_two_by_two(self):
        assignment = hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
        np.testing.assert_array_equal(assignment, [0, 1])

    def test_matches_enumeration_on_random_6x6(self, rng):
        for _ in range(200):
            cost = rng.uniform(size=(6, 6))
            assignment = hungarian(cost)
            total = cost[np.arange(6), assignment].sum()
            _, best = best_assignment_by_enumeration(cost)
            assert total == pytest.approx(best, rel=1e-12)
            assert sorted(assignment.tolist()) == list(range(6))

    def test_matches_enumeration_small_sizes(self, rng):
        for n in (1, 2, 3, 4, 5):
            for _ in range(20):
                cost = rng.normal(size=(n, n))
                assignment = hungarian(cost)
                total = cost[np.arange(n), assignment].sum()
                _, best = best_assignment_by_enumeration(cost)
                assert total == pytest.approx(best, rel=1e-9, abs=1e-12)

    def test_non_square_rejected(self):
        with pytest.raises(ShapeError):
            hungarian(np.zeros((2, 3)))

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            hungarian(np.array([[np.inf, 0.0], [0.0, 1.0]]))


class TestAcc:
    def test_relabeled_ground_truth_is_perfect(self, rng):
        labels = rng.integers(0, 10, size=200)
        perm = rng.permutation(10)
        assert acc(labels, perm[labels]) == 1.0

    def test_alternating_case(self):
        assert acc([0, 0, 1, 1], [0, 1, 0, 1]) == 0.5

    def test_single_giant_cluster_balanced_classes(self):
        labels = np.repeat(np.arange(10), 10)
        clusters = np.zeros(100, dtype=int)
        assert acc(labels, clusters) == pytest.approx(0.1)

    def test_matches_enumeration_oracle(self, rng):
        for _ in range(50):
            n_clusters = int(rng.integers(2, 5))
            labels = rng.integers(0, 4, size=30)
            clusters = rng.integers(0, n_clusters, size=30)
            assert acc(labels, clusters) == pytest.approx(
                acc_by_enumeration(labels, clusters), rel=1e-12)

    def test_more_clusters_than_classes(self, rng):
        labels = rng.integers(0, 3, size=60)
        clusters = rng.integers(0, 7, size=60)
        value = acc(labels, clusters)
        assert 0.0 <= value <= 1.0


class TestNmi:
    def test_identical_partitions(self, rng):
        labels = rng.integers(0, 10, size=100)
        assert nmi(labels, labels.copy()) == pytest.approx(1.0)

    def test_relabeled_partitions_still_one(self, rng):
        labels = rng.integers(0, 10, size=100)
        perm = rng.permutation(10)
        assert nmi(labels, perm[labels]) == pytest.approx(1.0)

    def test_constant_clustering_is_zero(self):
        labels = np.repeat(np.arange(10), 5)
        assert nmi(labels, np.zeros(50, dtype=int)) == 0.0

    def test_independent_product_case(self):
        assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == 0.0

    def test_matches_hand_oracle(self, rng):
        labels = rng.integers(0, 4, size=80)
        clusters = rng.integers(0, 3, size=80)
        mi = mutual_information(labels, clusters)
        assert mi == pytest.approx(mutual_information_nats(labels, clusters), rel=1e-10)
        want = mi / max(entropy_nats(labels), entropy_nats(clusters))
        assert nmi(labels, clusters) == pytest.approx(want, rel=1e-10)

    def test_matches_sklearn(self, rng):
        sk = pytest.importorskip("sklearn.metrics")
        labels = rng.integers(0, 10, size=300)
        clusters = rng.integers(0, 10, size=300)
        want = sk.normalized_mutual_info_score(labels, clusters, average_method="max")
        assert nmi(labels, clusters) == pytest.approx(want, rel=1e-9)


class TestAri:
    def test_identical_partitions(self, rng):
        labels = rng.integers(0, 10, size=60)
        assert ari(labels, labels.copy()) == pytest.approx(1.0)

    def test_hand_case_negative_half(self):
        assert ari([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(-0.5)

    def test_matches_pair_counting_oracle(self, rng):
        for _ in range(100):
            n = int(rng.integers(4, 13))
            labels = rng.integers(0, 3, size=n)
            clusters = rng.integers(0, 3, size=n)
            if len(set(labels.tolist())) < 2 and len(set(clusters.tolist())) < 2:
                continue
            assert ari(labels, clusters) == pytest.approx(
                ari_by_pair_counting(labels, clusters), rel=1e-9, abs=1e-12)

    def test_chance_level_near_zero(self, rng):
        labels = rng.integers(0, 10, size=500)
        values = [ari(labels, rng.permutation(labels)) for _ in range(500)]
        assert abs(float(np.mean(values))) < 0.02

    def test_pair_counts_recover_rand_index(self, rng):
        labels = rng.integers(0, 4, size=40)
        clusters = rng.integers(0, 4, size=40)
        a, b = pair_counts(labels, clusters)
        n_pairs = 40 * 39 / 2
        ri = (a + b) / n_pairs
        assert 0.0 <= ri <= 1.0
        same_l = labels[:, None] == labels[None, :]
        same_c = clusters[:, None] == clusters[None, :]
        triu = np.triu_indices(40, k=1)
        assert a == np.count_nonzero(same_l[triu] & same_c[triu])
        assert b == np.count_nonzero(~same_l[triu] & ~same_c[triu])

    def test_matches_sklearn(self, rng):
        sk = pytest.importorskip("sklearn.metrics")
        labels = rng.integers(0, 10, size=300)
        clusters = rng.integers(0, 10, size=300)
        assert ari(labels, clusters) == pytest.approx(
            sk.adjusted_rand_score(labels, clusters), rel=1e-9)


class TestRelabelingInvariance:
    def test_all_metrics_invariant_under_cluster_relabeling(self, rng):
        labels = rng.integers(0, 10, size=150)
        clusters = rng.integers(0, 10, size=150)
        perm = rng.permutation(10)
        relabeled = perm[clusters]
        assert nmi(labels, clusters) == pytest.approx(nmi(labels, relabeled), rel=1e-12)
        assert acc(labels, clusters) == pytest.approx(acc(labels, relabeled), rel=1e-12)
        assert ari(labels, clusters) == pytest.approx(ari(labels, relabeled), rel=1e-12)


class TestConfusionMatrix:
    def test_perfect_predictions_diagonal(self, rng):
        labels = rng.integers(0, 10, size=100)
        table = confusion_matrix(labels, labels)
        assert table.sum() == 100
        assert np.all(table == np.diag(np.diag(table)))

    def test_row_sums_equal_class_counts(self, rng):
        labels = rng.integers(0, 10, size=200)
        preds = rng.integers(0, 10, size=200)
        table = confusion_matrix(labels, preds)
        np.testing.assert_array_equal(table.sum(axis=1),
                                      np.bincount(labels, minlength=10))
        assert np.trace(table) / 200 == pytest.approx(np.mean(labels == preds))

    def test_hand_case_with_two_swaps(self):
        true = np.array([1, 1, 2, 2, 3, 3])
        pred = np.array([1, 2, 2, 1, 3, 3])
        table = confusion_matrix(true, pred)
        want = np.zeros((10, 10), dtype=np.int64)
        want[1, 1] = 1
        want[1, 2] = 1
        want[2, 2] = 1
        want[2, 1] = 1
        want[3, 3] = 2
        np.testing.assert_array_equal(table, want)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            confusion_matrix([0, 11], [0, 1])


def test_contingency_table_counts(rng):
    labels = np.array([0, 0, 1, 1, 2])
    clusters = np.array([5, 5, 5, 6, 6])
    table = contingency_table(labels, clusters)
    np.testing.assert_array_equal(table, [[2, 0], [1, 1], [0, 1]])
