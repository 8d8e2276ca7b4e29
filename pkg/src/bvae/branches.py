"""Classifier branches over latent codes.

Two families:

* differentiable training branches that feed gradients back into the
  encoder — an MLP/linear softmax head (parametric), a within-batch soft
  k-nearest-neighbor vote, and a running-class-centroid head (both
  instance-based, differentiable w.r.t. the codes only);
* exact evaluation classifiers — brute-force kNN majority vote and a
  bootstrap random forest with Gini CART splits — refit on frozen codes
  for reporting.

During training a kNN-flavored run optimizes the soft-kNN surrogate and an
RF-flavored run the class-centroid surrogate; the exact classifiers never
produce gradients.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .nn.layers import Activation, Dense, Sequential, activation
from .nn.losses import softmax_cross_entropy
from .rng import substream

NUM_CLASSES = 10
PROB_FLOOR = 1e-7  # vote probabilities are clipped here before the log

MLP_HIDDEN = (512, 256, 128)


@dataclass
class BranchSpec:
    """User-facing branch configuration carried inside TrainConfig."""

    kind: str                    # mlp | linear | knn | rf
    neighbors: int = 40          # knn: exact vote size and surrogate context size
    temperature: float = 1.0     # soft surrogates
    estimators: int = 40         # rf
    max_depth: int = 10          # rf

    def __post_init__(self):
        if self.kind not in ("mlp", "linear", "knn", "rf"):
            raise ConfigError(f"unknown branch kind {self.kind!r}")
        if self.neighbors < 1:
            raise ConfigError("neighbors must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    def to_dict(self):
        return {"kind": self.kind, "neighbors": self.neighbors,
                "temperature": self.temperature, "estimators": self.estimators,
                "max_depth": self.max_depth}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class BranchOutput:
    probs: np.ndarray            # [B, 10] rows on the simplex
    differentiable: bool
    per_sample_loss: np.ndarray | None = field(default=None)


def _check_probs(probs, who):
    if not np.all(np.isfinite(probs)):
        raise NumericError(f"{who}: non-finite branch probabilities")


# ---------------------------------------------------------------------------
# parametric heads


class MlpBranch:
    """Softmax classifier head on the latent codes; hidden=() gives the
    single linear layer variant."""

    differentiable = True
    has_params = True

    def __init__(self, latent_dim, rng, hidden=MLP_HIDDEN, dtype=np.float32):
        layers = []
        prev = latent_dim
        for i, width in enumerate(hidden):
            layers.append(Dense(prev, width, rng, name=f"branch_dense{i + 1}", dtype=dtype))
            layers.append(Activation("relu"))
            prev = width
        layers.append(Dense(prev, NUM_CLASSES, rng, name="branch_logits", dtype=dtype))
        self.net = Sequential(layers)

    def forward(self, z):
        logits = self.net.forward(z)
        probs = activation("softmax", logits)
        _check_probs(probs, "mlp branch")
        return BranchOutput(probs, differentiable=True)

    def loss_and_grads(self, z, labels_onehot, sample_weights):
        logits = self.net.forward(z)
        loss, grad_logits = softmax_cross_entropy(logits, labels_onehot, sample_weights)
        grad_z = self.net.backward(grad_logits)
        probs = activation("softmax", logits)
        _check_probs(probs, "mlp branch")
        return loss, grad_z, BranchOutput(probs, differentiable=True)

    def param_items(self):
        return self.net.param_items("branch.")

    def grad_items(self):
        return self.net.grad_items("branch.")

    def aux_state_items(self):
        return []


# ---------------------------------------------------------------------------
# soft k-nearest-neighbor surrogate


def soft_knn_probs(z_query, context_z, context_labels, k, tau):
    """Temperature-softmax kNN vote for one query point.

    Weights are softmax(-||z - z_j||^2 / tau) over the k nearest context
    points; the class probabilities are the weighted label votes.
    """
    context_z = np.asarray(context_z)
    if context_z.ndim != 2 or context_z.shape[0] == 0:
        raise ConfigError("soft_knn needs a nonempty 2-D context")
    if context_z.shape[0] < k:
        raise ConfigError(f"context holds {context_z.shape[0]} points, need k={k}")
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    diff = context_z - np.asarray(z_query)[None, :]
    d2 = (diff * diff).sum(axis=1)
    nearest = np.argpartition(d2, k - 1)[:k]
    scores = -d2[nearest] / tau
    scores -= scores.max()
    w = np.exp(scores)
    w /= w.sum()
    probs = np.zeros(NUM_CLASSES)
    np.add.at(probs, np.asarray(context_labels)[nearest], w)
    return probs


class SoftKnnBranch:
    """Within-batch soft kNN: every sample is classified by a softmax vote
    over its k nearest batch mates (self excluded).  Differentiable w.r.t.
    the codes in both their query and context roles; no parameters."""

    differentiable = True
    has_params = False

    def __init__(self, neighbors=40, temperature=1.0):
        if neighbors < 1:
            raise ConfigError("neighbors must be >= 1")
        if temperature <= 0:
            raise ConfigError("temperature must be positive")
        self.k = neighbors
        self.tau = temperature

    def _votes(self, z, labels):
        batch = z.shape[0]
        if batch - 1 < self.k:
            raise ConfigError(
                f"batch of {batch} leaves {batch - 1} context points, need k={self.k}")
        sq = (z * z).sum(axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
        np.fill_diagonal(d2, np.inf)
        neighbor_idx = np.argpartition(d2, self.k - 1, axis=1)[:, :self.k]
        rows = np.arange(batch)[:, None]
        scores = -d2[rows, neighbor_idx] / self.tau
        scores -= scores.max(axis=1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=1, keepdims=True)
        match = (labels[neighbor_idx] == labels[:, None])
        probs = np.zeros((batch, NUM_CLASSES), dtype=z.dtype)
        np.add.at(probs, (rows.repeat(self.k).reshape(-1),
                          labels[neighbor_idx].reshape(-1)), w.reshape(-1))
        return probs, w, match, neighbor_idx

    def forward(self, z, labels):
        probs, _, _, _ = self._votes(z, labels)
        _check_probs(probs, "soft_knn branch")
        return BranchOutput(probs, differentiable=True)

    def loss_and_grads(self, z, labels_onehot, sample_weights):
        labels = labels_onehot.argmax(axis=1)
        batch = z.shape[0]
        probs, w, match, neighbor_idx = self._votes(z, labels)
        _check_probs(probs, "soft_knn branch")
        p_true = probs[np.arange(batch), labels]
        clipped = p_true <= PROB_FLOOR
        p_safe = np.maximum(p_true, PROB_FLOOR)
        per_sample = -np.log(p_safe)
        omega = (np.ones(batch, dtype=z.dtype) if sample_weights is None
                 else np.asarray(sample_weights, dtype=z.dtype))
        loss = float(np.mean(omega * per_sample))

        # d loss / d softmax-score, with clipped rows contributing nothing
        a = np.where(match, -1.0 / p_safe[:, None], 0.0)
        a[clipped] = 0.0
        g = w * (a - (w * a).sum(axis=1, keepdims=True))
        coef = g * (omega / batch)[:, None] * (2.0 / self.tau)
        diff = z[:, None, :] - z[neighbor_idx]            # [B, k, d]
        grad_z = -(coef[:, :, None] * diff).sum(axis=1)   # query role
        np.add.at(grad_z, neighbor_idx.reshape(-1),        # context role
                  (coef[:, :, None] * diff).reshape(-1, z.shape[1]))
        out = BranchOutput(probs, differentiable=True, per_sample_loss=per_sample)
        return loss, grad_z.astype(z.dtype), out

    def param_items(self):
        return []

    def grad_items(self):
        return []

    def aux_state_items(self):
        return []


# ---------------------------------------------------------------------------
# running class-centroid surrogate


class ClassMeanBranch:
    """Softmax over negative squared distances to per-class latent centroids.

    Centroids track batch class means with momentum and act as constants in
    the gradient, so the pull on each code points at its class centroid.
    """

    differentiable = True
    has_params = False

    def __init__(self, latent_dim, temperature=1.0, momentum=0.9, dtype=np.float32):
        if temperature <= 0:
            raise ConfigError("temperature must be positive")
        self.tau = temperature
        self.momentum = momentum
        self.centroids = np.zeros((NUM_CLASSES, latent_dim), dtype=dtype)
        self.seen = np.zeros(NUM_CLASSES, dtype=bool)

    def update_centroids(self, z, labels):
        for cls in np.unique(labels):
            mean = z[labels == cls].mean(axis=0)
            if self.seen[cls]:
                self.centroids[cls] = (self.momentum * self.centroids[cls]
                                       + (1.0 - self.momentum) * mean)
            else:
                self.centroids[cls] = mean
                self.seen[cls] = True

    def _scores(self, z):
        diff = z[:, None, :] - self.centroids[None, :, :]
        s = -(diff * diff).sum(axis=2) / self.tau
        s[:, ~self.seen] = -1e9  # unseen classes cannot win
        return s

    def forward(self, z, labels=None):
        probs = activation("softmax", self._scores(z))
        _check_probs(probs, "class_mean branch")
        return BranchOutput(probs, differentiable=True)

    def loss_and_grads(self, z, labels_onehot, sample_weights):
        batch = z.shape[0]
        scores = self._scores(z)
        loss, grad_scores = softmax_cross_entropy(scores, labels_onehot, sample_weights)
        # scores are -||z - m_c||^2 / tau with constant centroids
        grad_z = (2.0 / self.tau) * (grad_scores @ self.centroids
                                     - grad_scores.sum(axis=1, keepdims=True) * z)
        probs = activation("softmax", scores)
        _check_probs(probs, "class_mean branch")
        return loss, grad_z.astype(z.dtype), BranchOutput(probs, differentiable=True)

    def param_items(self):
        return []

    def grad_items(self):
        return []

    def aux_state_items(self):
        # centroids ride along in checkpoints as float32 blocks
        return [("branch.centroids", self.centroids),
                ("branch.centroids_seen", self.seen.astype(np.float32))]

    def load_aux_state(self, blocks):
        self.centroids[:] = blocks["branch.centroids"].reshape(self.centroids.shape)
        self.seen[:] = blocks["branch.centroids_seen"].reshape(-1) > 0.5


# ---------------------------------------------------------------------------
# exact evaluation classifiers


class ExactKnn:
    """Brute-force majority vote among the n nearest training codes."""

    differentiable = False

    def __init__(self, train_z, train_labels, n):
        train_z = np.asarray(train_z)
        if not 1 <= n <= train_z.shape[0]:
            raise ConfigError(f"n={n} out of range for {train_z.shape[0]} training points")
        self.z = train_z
        self.labels = np.asarray(train_labels)
        self.n = n

    def predict_probs(self, queries, chunk=2048):
        queries = np.asarray(queries)
        probs = np.empty((queries.shape[0], NUM_CLASSES), dtype=np.float64)
        sq_train = (self.z * self.z).sum(axis=1)
        for lo in range(0, queries.shape[0], chunk):
            q = queries[lo:lo + chunk]
            d2 = (q * q).sum(axis=1)[:, None] + sq_train[None, :] - 2.0 * (q @ self.z.T)
            nearest = np.argpartition(d2, self.n - 1, axis=1)[:, :self.n]
            votes = self.labels[nearest]
            counts = np.zeros((q.shape[0], NUM_CLASSES), dtype=np.float64)
            rows = np.repeat(np.arange(q.shape[0]), self.n)
            np.add.at(counts, (rows, votes.reshape(-1)), 1.0)
            probs[lo:lo + chunk] = counts / self.n
        return probs

    def predict(self, queries):
        # argmax takes the first maximum, so vote ties go to the lowest class
        return self.predict_probs(queries).argmax(axis=1)


def fit_exact_knn(train_z, train_labels, n):
    return ExactKnn(train_z, train_labels, n)


class _TreeNode:
    __slots__ = ("feature", "threshold", "left", "right", "dist")

    def __init__(self, dist):
        self.feature = -1
        self.threshold = 0.0
        self.left = None
        self.right = None
        self.dist = dist


def _gini_best_split(values, labels, feature_ids):
    """Best (feature, threshold, score) by prefix-sum Gini scan; None if no
    candidate threshold separates the node."""
    n = labels.shape[0]
    total = np.zeros(NUM_CLASSES)
    np.add.at(total, labels, 1.0)
    best = None
    for f in feature_ids:
        order = np.argsort(values[:, f], kind="stable")
        v = values[order, f]
        y = labels[order]
        onehot = np.zeros((n, NUM_CLASSES))
        onehot[np.arange(n), y] = 1.0
        left_counts = np.cumsum(onehot, axis=0)[:-1]          # splits after i+1 samples
        left_n = np.arange(1, n)
        right_counts = total[None, :] - left_counts
        right_n = n - left_n
        gini_l = 1.0 - ((left_counts / left_n[:, None]) ** 2).sum(axis=1)
        gini_r = 1.0 - ((right_counts / right_n[:, None]) ** 2).sum(axis=1)
        score = (left_n * gini_l + right_n * gini_r) / n
        valid = v[1:] > v[:-1]
        if not valid.any():
            continue
        score = np.where(valid, score, np.inf)
        idx = int(np.argmin(score))
        if best is None or score[idx] < best[2]:
            best = (int(f), float((v[idx] + v[idx + 1]) / 2.0), float(score[idx]))
    return best


class RandomForest:
    """Bootstrap forest of Gini CART trees with sqrt(d) feature draws per split.

    Probabilities average the per-tree leaf class distributions; everything
    is driven by per-tree streams spawned from (seed, tree index).
    """

    differentiable = False

    def __init__(self, train_z, train_labels, n_estimators=40, max_depth=10, seed=0):
        z = np.asarray(train_z, dtype=np.float64)
        labels = np.asarray(train_labels)
        self.n_features = z.shape[1]
        self.trees = []
        n = z.shape[0]
        subset = max(1, int(round(np.sqrt(self.n_features))))
        for t in range(n_estimators):
            rng = substream(seed, "forest", t)
            boot = rng.integers(0, n, size=n)
            self.trees.append(self._build(z[boot], labels[boot], 0, max_depth, subset, rng))

    def _build(self, values, labels, depth, max_depth, subset, rng):
        dist = np.zeros(NUM_CLASSES)
        np.add.at(dist, labels, 1.0)
        dist /= dist.sum()
        node = _TreeNode(dist)
        if depth >= max_depth or len(labels) < 2 or np.count_nonzero(dist) == 1:
            return node
        feature_ids = rng.choice(self.n_features, size=min(subset, self.n_features),
                                 replace=False)
        best = _gini_best_split(values, labels, feature_ids)
        if best is None:
            return node
        feature, threshold, _ = best
        mask = values[:, feature] <= threshold
        node.feature = feature
        node.threshold = threshold
        node.left = self._build(values[mask], labels[mask], depth + 1, max_depth, subset, rng)
        node.right = self._build(values[~mask], labels[~mask], depth + 1, max_depth, subset, rng)
        return node

    def _tree_probs(self, node, values, indices, out):
        if node.left is None:
            out[indices] += node.dist
            return
        mask = values[indices, node.feature] <= node.threshold
        left_idx = indices[mask]
        right_idx = indices[~mask]
        if left_idx.size:
            self._tree_probs(node.left, values, left_idx, out)
        if right_idx.size:
            self._tree_probs(node.right, values, right_idx, out)

    def predict_probs(self, queries):
        q = np.asarray(queries, dtype=np.float64)
        out = np.zeros((q.shape[0], NUM_CLASSES))
        indices = np.arange(q.shape[0])
        for tree in self.trees:
            self._tree_probs(tree, q, indices, out)
        return out / len(self.trees)

    def predict(self, queries):
        return self.predict_probs(queries).argmax(axis=1)


def fit_random_forest(train_z, train_labels, n_estimators=40, max_depth=10, seed=0):
    return RandomForest(train_z, train_labels, n_estimators, max_depth, seed)


# ---------------------------------------------------------------------------
# wiring


def make_training_branch(spec, latent_dim, rng, dtype=np.float32):
    """Instantiate the differentiable branch a TrainConfig asks for."""
    if spec is None:
        return None
    if spec.kind == "mlp":
        return MlpBranch(latent_dim, rng, hidden=MLP_HIDDEN, dtype=dtype)
    if spec.kind == "linear":
        return MlpBranch(latent_dim, rng, hidden=(), dtype=dtype)
    if spec.kind == "knn":
        return SoftKnnBranch(spec.neighbors, spec.temperature)
    if spec.kind == "rf":
        return ClassMeanBranch(latent_dim, spec.temperature, dtype=dtype)
    raise ConfigError(f"unknown branch kind {spec.kind!r}")


def fit_exact_reporter(spec, train_z, train_labels, seed=0):
    """Exact classifier refit each epoch for kNN/RF runs (report only)."""
    if spec is None or spec.kind in ("mlp", "linear"):
        return None
    if spec.kind == "knn":
        return fit_exact_knn(train_z, train_labels, spec.neighbors)
    return fit_random_forest(train_z, train_labels, spec.estimators,
                             spec.max_depth, seed)
