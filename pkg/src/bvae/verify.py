"""Self-verification batteries: finite-difference gradient checks and
metric oracles.  Used by the `grad-check` and `metrics-selftest` CLI verbs
and by the acceptance test suite.

Gradient checks run at float64 with central differences (step 1e-5) and
report max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
"""

import itertools

import numpy as np

from .branches import MlpBranch, SoftKnnBranch
from .data.dataset import one_hot
from .metrics import acc, ari, hungarian, kmeans, lloyd_single_run, nmi
from .model import VaeModel
from .nn.gradcheck import grad_check, relative_error
from .nn.layers import Activation, Conv2D, ConvTranspose2D, Dense, Sequential
from .nn.losses import reconstruction_loss, softmax_cross_entropy
from .objective import kl_divergence
from .rng import substream
from .trainer import composite_loss_and_grads

LAYER_TOL = 1e-4
END_TO_END_TOL = 1e-3
ADJOINT_TOL = 1e-10


def _wire_loss(net_or_layer, x, probe_weights):
    """Scalar readout <forward(x), g> so every output element is probed."""

    def loss_and_grads():
        out = net_or_layer.forward(x)
        loss = float((out * probe_weights).sum())
        grad_in = net_or_layer.backward(probe_weights)
        if hasattr(net_or_layer, "grad_items"):
            grads = [g for _, g in net_or_layer.grad_items()]
        else:
            grads = [net_or_layer.grads[k] for k in net_or_layer.params]
        return loss, [grad_in] + grads

    if hasattr(net_or_layer, "param_items"):
        params = [a for _, a in net_or_layer.param_items()]
    else:
        params = [net_or_layer.params[k] for k in net_or_layer.params]
    return loss_and_grads, [x] + params


def layer_checks(seed=0):
    """Finite-difference checks for every layer kind; returns {name: error}."""
    rng = np.random.default_rng(seed)
    results = {}

    dense = Dense(4, 3, rng, dtype=np.float64)
    x = rng.normal(size=(3, 4))
    fn, arrays = _wire_loss(dense, x, rng.normal(size=(3, 3)))
    results["dense"] = grad_check(fn, arrays)

    for stride in (1, 2):
        conv = Conv2D(2, 3, rng, stride=stride, dtype=np.float64)
        x = rng.normal(size=(2, 6, 6, 2))
        g = rng.normal(size=conv.forward(x).shape)
        fn, arrays = _wire_loss(conv, x, g)
        results[f"conv2d_stride{stride}"] = grad_check(fn, arrays)

    tconv = ConvTranspose2D(3, 2, rng, stride=2, dtype=np.float64)
    x = rng.normal(size=(2, 3, 3, 3))
    g = rng.normal(size=tconv.forward(x).shape)
    fn, arrays = _wire_loss(tconv, x, g)
    results["conv2d_transpose"] = grad_check(fn, arrays)

    for kind in ("relu", "sigmoid", "softmax"):
        layer = Activation(kind)
        x = rng.normal(size=(3, 5))
        x[np.abs(x) < 1e-3] = 0.1
        fn, arrays = _wire_loss(layer, x, rng.normal(size=(3, 5)))
        results[f"activation_{kind}"] = grad_check(fn, arrays)

    logits = rng.normal(size=(3, 6))
    labels = one_hot(rng.integers(0, 6, size=3), 6)
    weights = rng.uniform(0.5, 2.0, size=3)

    def ce_fn():
        loss, grad = softmax_cross_entropy(logits, labels, weights)
        return loss, [grad]

    results["softmax_cross_entropy"] = grad_check(ce_fn, [logits])

    for mode in ("bce", "mse"):
        pred = rng.uniform(0.2, 0.8, size=(2, 4, 4, 1))
        target = rng.uniform(0.2, 0.8, size=(2, 4, 4, 1))

        def recon_fn():
            loss, grad, _ = reconstruction_loss(pred, target, mode, weights[:2])
            return loss, [grad]

        results[f"reconstruction_{mode}"] = grad_check(recon_fn, [pred])

    mu = rng.normal(size=(3, 2))
    log_var = rng.normal(size=(3, 2))

    def kl_fn():
        loss, gm, gv = kl_divergence(mu, log_var, weights)
        return loss, [gm, gv]

    results["kl_divergence"] = grad_check(kl_fn, [mu, log_var])

    tiny = Sequential([Dense(3, 4, rng, dtype=np.float64), Activation("relu"),
                       Dense(4, 3, rng, dtype=np.float64), Activation("softmax")])
    x = rng.normal(size=(2, 3))
    x[np.abs(x) < 1e-3] = 0.1
    fn, arrays = _wire_loss(tiny, x, rng.normal(size=(2, 3)))
    results["dense_relu_softmax_net"] = grad_check(fn, arrays)

    conv_net = Sequential([Conv2D(1, 2, rng, stride=2, dtype=np.float64),
                           Activation("sigmoid")])
    x = rng.normal(size=(2, 4, 4, 1))
    g = rng.normal(size=conv_net.forward(x).shape)
    fn, arrays = _wire_loss(conv_net, x, g)
    results["conv_sigmoid_net"] = grad_check(fn, arrays)

    z = rng.normal(size=(6, 2))
    z_labels = one_hot(rng.integers(0, 3, size=6))
    soft = SoftKnnBranch(3, 0.8)

    def knn_fn():
        loss, grad_z, _ = soft.loss_and_grads(z, z_labels, weights_6)
        return loss, [grad_z]

    weights_6 = rng.uniform(0.5, 2.0, size=6)
    results["soft_knn_grad_z"] = grad_check(knn_fn, [z])
    return results


def reduced_model(seed=0, dtype=np.float64, with_branch=True):
    """4x4-image model small enough to probe parameter by parameter."""
    rng = np.random.default_rng(seed)
    model = VaeModel(latent_dim=2, output_activation="sigmoid", rng=rng,
                     image_shape=(4, 4, 1), conv_filters=(3, 5), trunk_units=6,
                     dtype=dtype)
    branch = MlpBranch(2, rng, hidden=(8,), dtype=dtype) if with_branch else None
    return model, branch


def end_to_end_check(seed=0, recon_mode="bce", recon_weight=0.7, branch_weight=3.0):
    """Finite differences on the complete objective of a reduced model."""
    rng = np.random.default_rng(seed)
    model, branch = reduced_model(seed)
    images = rng.uniform(0.1, 0.9, size=(2, 4, 4, 1))
    labels = one_hot(rng.integers(0, 10, size=2))
    weights = rng.uniform(0.5, 2.0, size=2)
    eps = rng.normal(size=(2, 2))
    arrays = [a for _, a in model.param_items()] + [a for _, a in branch.param_items()]

    def loss_and_grads():
        breakdown, updates = composite_loss_and_grads(
            model, branch, images, labels, weights, images, eps,
            recon_weight, branch_weight, recon_mode)
        return breakdown.total, [g for _, _, g in updates]

    return grad_check(loss_and_grads, arrays)


def adjoint_check(seed=0):
    """<conv(x), y> vs <x, conv_transpose(y)> with shared kernels."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for shape, stride in (((2, 6, 6, 3), 1), ((2, 14, 14, 2), 2), ((1, 28, 28, 1), 2)):
        c_out = 4
        conv = Conv2D(shape[3], c_out, rng, stride=stride, dtype=np.float64)
        conv.params["b"][:] = 0.0
        tconv = ConvTranspose2D(c_out, shape[3], rng, stride=stride, dtype=np.float64)
        tconv.params["W"] = conv.params["W"].copy()
        tconv.params["b"][:] = 0.0
        x = rng.normal(size=shape)
        y = rng.normal(size=conv.forward(x).shape)
        lhs = float((conv.forward(x) * y).sum())
        rhs = float((x * tconv.forward(y)).sum())
        worst = max(worst, relative_error(lhs, rhs))
    return worst


def gradient_battery(seed=0):
    """All gradient/adjoint checks with their tolerances: {name: (err, tol)}."""
    results = {name: (err, LAYER_TOL) for name, err in layer_checks(seed).items()}
    results["end_to_end_objective"] = (end_to_end_check(seed), END_TO_END_TOL)
    results["end_to_end_mse"] = (end_to_end_check(seed, recon_mode="mse"),
                                 END_TO_END_TOL)
    results["conv_adjoint_identity"] = (adjoint_check(seed), ADJOINT_TOL)
    return results


# ---------------------------------------------------------------------------
# metric self-test


def _enumerate_assignment(cost):
    n = cost.shape[0]
    best = None
    for perm in itertools.permutations(range(n)):
        total = sum(cost[i, perm[i]] for i in range(n))
        if best is None or total < best:
            best = total
    return best


def _enumerate_acc(labels, clusters):
    cluster_ids = sorted(set(clusters.tolist()))
    best = 0
    for perm in itertools.permutations(range(10), len(cluster_ids)):
        mapping = dict(zip(cluster_ids, perm))
        hits = sum(1 for l, c in zip(labels, clusters) if mapping[c] == l)
        best = max(best, hits)
    return best / len(labels)


def _pair_count_ari(labels, clusters):
    n = len(labels)
    same_both = same_l = same_c = 0
    for i in range(n):
        for j in range(i + 1, n):
            sl = labels[i] == labels[j]
            sc = clusters[i] == clusters[j]
            same_l += sl
            same_c += sc
            same_both += sl and sc
    pairs = n * (n - 1) // 2
    expected = same_l * same_c / pairs
    max_index = (same_l + same_c) / 2
    if max_index == expected:
        return 1.0
    return (same_both - expected) / (max_index - expected)


def metrics_selftest(seed=0, rounds=50):
    """Oracle battery for the clustering metrics; returns {name: bool}."""
    rng = np.random.default_rng(seed)
    results = {}

    ok = True
    for _ in range(rounds):
        cost = rng.uniform(size=(5, 5))
        assignment = hungarian(cost)
        total = float(cost[np.arange(5), assignment].sum())
        ok &= abs(total - _enumerate_assignment(cost)) < 1e-9
    results["hungarian_vs_enumeration"] = bool(ok)

    ok = True
    for _ in range(rounds):
        labels = rng.integers(0, 4, size=25)
        clusters = rng.integers(0, int(rng.integers(2, 6)), size=25)
        ok &= abs(acc(labels, clusters) - _enumerate_acc(labels, clusters)) < 1e-9
    results["acc_vs_enumeration"] = bool(ok)

    ok = True
    for _ in range(rounds):
        n = int(rng.integers(4, 12))
        labels = rng.integers(0, 3, size=n)
        clusters = rng.integers(0, 3, size=n)
        ok &= abs(ari(labels, clusters) - _pair_count_ari(labels, clusters)) < 1e-9
    results["ari_vs_pair_counting"] = bool(ok)

    labels = rng.integers(0, 10, size=200)
    perm = rng.permutation(10)
    results["nmi_identity_and_constant"] = (
        abs(nmi(labels, labels) - 1.0) < 1e-12
        and nmi(labels, np.zeros(200, dtype=int)) == 0.0
        and abs(nmi(labels, perm[labels]) - 1.0) < 1e-12)

    clusters = rng.integers(0, 10, size=200)
    relabeled = perm[clusters]
    results["relabeling_invariance"] = (
        abs(nmi(labels, clusters) - nmi(labels, relabeled)) < 1e-12
        and abs(acc(labels, clusters) - acc(labels, relabeled)) < 1e-12
        and abs(ari(labels, clusters) - ari(labels, relabeled)) < 1e-12)

    points = rng.normal(size=(150, 2))
    ok = True
    for restart in range(5):
        run = lloyd_single_run(points, 6, substream(seed, "kmeans", restart))
        ok &= bool(np.all(np.diff(run.wcss_history) <= 1e-9))
    best = kmeans(points, k=6, restarts=5, seed=seed)
    singles = [lloyd_single_run(points, 6, substream(seed, "kmeans", r)).wcss
               for r in range(5)]
    ok &= abs(best.wcss - min(singles)) < 1e-9
    results["kmeans_wcss_descent_and_restart_pick"] = bool(ok)
    return results
