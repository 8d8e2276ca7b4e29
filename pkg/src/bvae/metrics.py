"""k-means over latent codes and clustering-quality metrics.

Metrics follow the usual definitions: NMI = MI / max(H(clusters),
H(labels)) in nats, ACC maximizes accuracy over one-to-one cluster-to-label
mappings (solved by a Hungarian assignment on the negated contingency
table), ARI is the chance-adjusted Rand index from the contingency table.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .rng import substream

NUM_CLASSES = 10


@dataclass
class Partition:
    assignments: np.ndarray        # [N] cluster ids in 0..K-1
    k: int
    centroids: np.ndarray | None = field(default=None)
    wcss: float = float("nan")
    wcss_history: list = field(default_factory=list)


@dataclass
class MetricsReport:
    nmi: float
    acc: float
    ari: float
    probe_accuracy: float
    confusion: np.ndarray          # [10, 10] counts, rows = true class

    def as_dict(self):
        return {"nmi": self.nmi, "acc": self.acc, "ari": self.ari,
                "classification_accuracy": self.probe_accuracy,
                "confusion": self.confusion.tolist()}


# ---------------------------------------------------------------------------
# k-means


def _kmeans_pp_init(points, k, rng):
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=points.dtype)
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = points[rng.integers(n)]
        else:
            probs = d2 / total
            centroids[i] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def lloyd_single_run(points, k, rng, max_iter=300, tol=1e-4):
    """One seeded k-means++ run; returns a Partition with its WCSS history."""
    centroids = _kmeans_pp_init(points, k, rng)
    history = []
    assignments = None
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assignments = d2.argmin(axis=1)
        point_d2 = d2[np.arange(len(points)), assignments]
        # re-seed empty clusters at the point farthest from its centroid
        for cluster in range(k):
            if not np.any(assignments == cluster):
                far = int(np.argmax(point_d2))
                centroids[cluster] = points[far]
                assignments[far] = cluster
                point_d2[far] = 0.0
        history.append(float(point_d2.sum()))
        new_centroids = np.empty_like(centroids)
        for cluster in range(k):
            new_centroids[cluster] = points[assignments == cluster].mean(axis=0)
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if shift <= tol:
            break
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assignments = d2.argmin(axis=1)
    wcss = float(d2[np.arange(len(points)), assignments].sum())
    history.append(wcss)
    return Partition(assignments, k, centroids, wcss, history)


def kmeans(points, k=NUM_CLASSES, restarts=10, max_iter=300, tol=1e-4, seed=0):
    """Best of `restarts` Lloyd runs by WCSS (ties to the earliest restart)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"points must be 2-D, got shape {points.shape}")
    if points.shape[0] < k:
        raise ConfigError(f"need at least k={k} points, got {points.shape[0]}")
    best = None
    for r in range(restarts):
        run = lloyd_single_run(points, k, substream(seed, "kmeans", r), max_iter, tol)
        if best is None or run.wcss < best.wcss:
            best = run
    return best


# ---------------------------------------------------------------------------
# optimal assignment


def hungarian(cost):
    """Minimum-cost one-to-one assignment of rows to columns.

    Augmenting-path algorithm with potentials, O(n^3).  Returns an array
    ``assignment`` with ``assignment[row] = column``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValidationError("cost matrix must be finite")
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)       # match[col] = row (1-based)
    way = np.zeros(n + 1, dtype=np.int64)
    for row in range(1, n + 1):
        match[0] = row
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    assignment = np.empty(n, dtype=np.int64)
    for col in range(1, n + 1):
        assignment[match[col] - 1] = col - 1
    return assignment


# ---------------------------------------------------------------------------
# clustering metrics


def contingency_table(labels, clusters):
    labels = np.asarray(labels)
    clusters = np.asarray(clusters)
    if labels.shape != clusters.shape:
        raise ValidationError("labels and clusters must have equal length")
    l_ids, l_inv = np.unique(labels, return_inverse=True)
    c_ids, c_inv = np.unique(clusters, return_inverse=True)
    table = np.zeros((len(l_ids), len(c_ids)), dtype=np.int64)
    np.add.at(table, (l_inv, c_inv), 1)
    return table


def acc(labels, clusters):
    """Best accuracy over one-to-one cluster-to-label mappings."""
    table = contingency_table(labels, clusters)
    size = max(table.shape)
    padded = np.zeros((size, size), dtype=np.float64)
    padded[:table.shape[0], :table.shape[1]] = table
    assignment = hungarian(-padded)
    hits = padded[np.arange(size), assignment].sum()
    return float(hits / len(np.asarray(labels)))


def entropy(assignments):
    _, counts = np.unique(np.asarray(assignments), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def mutual_information(labels, clusters):
    table = contingency_table(labels, clusters).astype(np.float64)
    n = table.sum()
    joint = table / n
    pl = joint.sum(axis=1, keepdims=True)
    pc = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    return float((joint[mask] * np.log(joint[mask] / (pl @ pc)[mask])).sum())


def nmi(labels, clusters):
    """MI normalized by the larger marginal entropy; 0 for a constant side."""
    if len(np.asarray(labels)) == 0:
        raise ValidationError("nmi needs nonempty inputs")
    h_l = entropy(labels)
    h_c = entropy(clusters)
    if h_l == 0.0 and h_c == 0.0:
        return 1.0  # both partitions are single blocks: identical
    mi = mutual_information(labels, clusters)
    if mi <= 0.0:
        return 0.0
    return mi / max(h_l, h_c)


def pair_counts(labels, clusters):
    """(a, b): pairs clustered together in both / separated in both."""
    table = contingency_table(labels, clusters).astype(np.float64)
    n = table.sum()
    sum_cells = (table * (table - 1) / 2).sum()
    a_marg = table.sum(axis=1)
    b_marg = table.sum(axis=0)
    sum_l = (a_marg * (a_marg - 1) / 2).sum()
    sum_c = (b_marg * (b_marg - 1) / 2).sum()
    total = n * (n - 1) / 2
    a = sum_cells
    b = total - sum_l - sum_c + sum_cells
    return float(a), float(b)


def ari(labels, clusters):
    """Adjusted Rand index from the contingency table."""
    labels = np.asarray(labels)
    if len(labels) < 2:
        raise ValidationError("ari needs at least two samples")
    table = contingency_table(labels, clusters).astype(np.float64)
    n = table.sum()
    sum_cells = (table * (table - 1) / 2).sum()
    sum_l = (table.sum(axis=1) * (table.sum(axis=1) - 1) / 2).sum()
    sum_c = (table.sum(axis=0) * (table.sum(axis=0) - 1) / 2).sum()
    total = n * (n - 1) / 2
    expected = sum_l * sum_c / total
    max_index = (sum_l + sum_c) / 2
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def confusion_matrix(true_labels, predicted_labels, num_classes=NUM_CLASSES):
    true_labels = np.asarray(true_labels)
    predicted_labels = np.asarray(predicted_labels)
    if true_labels.shape != predicted_labels.shape:
        raise ValidationError("label arrays must have equal length")
    for name, arr in (("true", true_labels), ("predicted", predicted_labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValidationError(f"{name} labels outside 0..{num_classes - 1}")
    table = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(table, (true_labels, predicted_labels), 1)
    return table
