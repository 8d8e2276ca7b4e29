"""Full training loop: data + model + branch under one weighted objective.

Per batch: encode, sample the latent, decode, score reconstruction +
divergence-from-prior + classifier branch, backpropagate all three paths
into the shared encoder, and take one Adam step.  Per-sample class weights
multiply every term.  All randomness comes from named substreams of the
config seed, so a (config, seed) pair fully determines the checkpoint and
training can resume bit-exactly from any epoch boundary.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .branches import BranchSpec, ClassMeanBranch, fit_exact_reporter, make_training_branch
from .data.dataset import batch_iter, one_hot
from .errors import ConfigError, DataError, NumericError
from .metrics import MetricsReport, confusion_matrix, kmeans
from .model import VaeModel, reparameterize
from .nn.adam import Adam
from .nn.losses import reconstruction_loss, softmax_cross_entropy
from .objective import kl_divergence, total_loss
from .rng import substream

ADAM_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-7

PROBE_HIDDEN = (512, 256, 128)
PROBE_EPOCHS = 20
PROBE_BATCH = 512

# per-class loss-weight presets for the confusion-driven weighting runs
WEIGHT_PRESETS = {
    "boost012": {0: 10.0, 1: 10.0, 2: 10.0, 3: 0.1, 6: 0.1, 7: 0.1, 9: 0.1},
    "boost0126": {0: 2.0, 1: 2.0, 2: 2.0, 6: 2.0, 3: 0.5, 5: 0.5, 7: 0.5, 9: 0.5},
    "boost06": {0: 2.0, 6: 2.0, 4: 0.5, 5: 0.5, 8: 0.5},
}

SYNTHETIC_TARGET_KINDS = ("gaussian", "square", "wavelet")

CHECKPOINT_MAGIC = b"BVAECKPT1\n"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Everything that determines a training run.

    ``target_mode`` is "self" or "fixed:<kind>"; synthetic fixed targets
    force mse reconstruction under a relu output layer.  The experiment
    grids use latent_dim in {2, 3, 5, 10}.
    """

    recon_weight: float = 1.0
    branch_weight: float = 0.0
    branch: BranchSpec | None = None
    target_mode: str = "self"
    latent_dim: int = 2
    epochs: int = 30
    batch_size: int = 512
    seed: int = 0
    class_weights: dict = field(default_factory=dict)
    recon_mode: str = "bce"
    dataset: str = "mnist"
    train_subset: int | None = None

    def __post_init__(self):
        if isinstance(self.branch, dict):
            self.branch = BranchSpec.from_dict(self.branch)
        self.class_weights = {int(k): float(v) for k, v in self.class_weights.items()}
        if self.recon_weight <= 0:
            raise ConfigError("recon_weight must be positive")
        if self.branch_weight < 0:
            raise ConfigError("branch_weight must be nonnegative")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.dataset not in ("mnist", "mnist_rotated"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.recon_mode not in ("bce", "mse"):
            raise ConfigError(f"unknown recon_mode {self.recon_mode!r}")
        kind = self.target_kind
        if kind in SYNTHETIC_TARGET_KINDS:
            self.recon_mode = "mse"

    @property
    def target_kind(self):
        if self.target_mode == "self":
            return None
        if self.target_mode.startswith("fixed:"):
            return self.target_mode.split(":", 1)[1]
        raise ConfigError(f"target_mode must be 'self' or 'fixed:<kind>', "
                          f"got {self.target_mode!r}")

    @property
    def output_activation(self):
        return "relu" if self.target_kind in SYNTHETIC_TARGET_KINDS else "sigmoid"

    def to_dict(self):
        d = {
            "recon_weight": self.recon_weight,
            "branch_weight": self.branch_weight,
            "branch": None if self.branch is None else self.branch.to_dict(),
            "target_mode": self.target_mode,
            "latent_dim": self.latent_dim,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "class_weights": {str(k): v for k, v in self.class_weights.items()},
            "recon_mode": self.recon_mode,
            "dataset": self.dataset,
            "train_subset": self.train_subset,
        }
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("branch"):
            d["branch"] = BranchSpec.from_dict(d["branch"])
        return cls(**d)

    def config_hash(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]


def resolve_target(target_mode, images, labels, target_set):
    """Reconstruction target per sample: the input itself, or the per-class
    fixed image selected by the label."""
    if target_mode == "self":
        return images
    if not target_mode.startswith("fixed:"):
        raise ConfigError(f"unknown target_mode {target_mode!r}")
    if target_set is None:
        raise ConfigError("fixed target mode needs a TargetSet")
    return target_set.for_labels(labels)


def composite_loss_and_grads(model, branch, images, onehot_labels, weights,
                             targets_batch, eps, recon_weight, branch_weight,
                             recon_mode):
    """One full forward/backward through reconstruction, prior-divergence and
    branch paths.  Returns (LossBreakdown, [(path, param, grad), ...]) with
    all three gradient paths accumulated into the shared encoder."""
    mu, log_var = model.encode(images)
    latent = reparameterize(mu, log_var, eps)
    x_hat = model.decode(latent.z)
    recon, grad_xhat, _ = reconstruction_loss(x_hat, targets_batch, recon_mode, weights)
    kl, grad_mu_kl, grad_lv_kl = kl_divergence(mu, log_var, weights)

    branch_active = branch is not None and branch_weight > 0
    if branch_active:
        branch_loss, grad_z_branch, _ = branch.loss_and_grads(
            latent.z, onehot_labels, weights)
    else:
        branch_loss, grad_z_branch = 0.0, None

    breakdown = total_loss(recon_weight, branch_weight, recon, kl, branch_loss)

    grad_z = model.backward_decoder(recon_weight * grad_xhat)
    if grad_z_branch is not None:
        grad_z = grad_z + branch_weight * grad_z_branch
    grad_mu = grad_z + grad_mu_kl
    grad_log_var = grad_z * (0.5 * np.exp(0.5 * log_var) * eps) + grad_lv_kl
    model.backward_encoder(grad_mu, grad_log_var)

    updates = [(path, param, grad) for (path, param), (_, grad)
               in zip(model.param_items(), model.grad_items())]
    if branch_active and branch.has_params:
        updates += [(path, param, branch_weight * grad) for (path, param), (_, grad)
                    in zip(branch.param_items(), branch.grad_items())]
    return breakdown, updates


class Trainer:
    """Owns the model, branch, optimizer, and loss history for one config."""

    def __init__(self, config):
        self.config = config
        init_rng = substream(config.seed, "init")
        self.model = VaeModel(
            latent_dim=config.latent_dim,
            output_activation=config.output_activation,
            rng=init_rng,
        )
        self.branch = make_training_branch(config.branch, config.latent_dim, init_rng)
        self.adam = Adam(ADAM_LR, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
        self.epochs_completed = 0
        self.history = []

    # -- one optimization step -------------------------------------------

    def _branch_active(self):
        return self.branch is not None and self.config.branch_weight > 0

    def train_step(self, images, labels, onehot_labels, weights, targets_batch, eps):
        cfg = self.config
        if self._branch_active() and isinstance(self.branch, ClassMeanBranch):
            # centroids follow the pre-update codes and act as constants
            mu, log_var = self.model.encode(images)
            self.branch.update_centroids(
                reparameterize(mu, log_var, eps).z, labels)
        breakdown, updates = composite_loss_and_grads(
            self.model, self.branch, images, onehot_labels, weights,
            targets_batch, eps, cfg.recon_weight, cfg.branch_weight, cfg.recon_mode)
        if not np.isfinite(breakdown.total):
            raise NumericError(
                f"non-finite loss at epoch {self.epochs_completed}: "
                f"recon={breakdown.recon} kl={breakdown.kl} "
                f"branch={breakdown.branch}")
        self.adam.step(updates)
        return breakdown

    # -- epochs ------------------------------------------------------------

    def run_epoch(self, train_ds, target_set):
        cfg = self.config
        epoch = self.epochs_completed
        sums = np.zeros(4)
        steps = 0
        for step, (images, onehot_labels, weights, labels) in enumerate(
                batch_iter(train_ds, cfg.batch_size, cfg.seed, epoch,
                           cfg.class_weights)):
            eps = substream(cfg.seed, "epsilon", epoch, step).standard_normal(
                (images.shape[0], cfg.latent_dim)).astype(np.float32)
            targets_batch = resolve_target(cfg.target_mode, images, labels, target_set)
            breakdown = self.train_step(images, labels, onehot_labels, weights,
                                        targets_batch, eps)
            sums += (breakdown.recon, breakdown.kl, breakdown.branch, breakdown.total)
            steps += 1
        entry = {"epoch": epoch, "recon": sums[0] / steps, "kl": sums[1] / steps,
                 "branch": sums[2] / steps, "total": sums[3] / steps}
        if self.branch is not None and self.config.branch is not None \
                and self.config.branch.kind in ("knn", "rf"):
            entry.update(self._exact_reporter_entry(train_ds))
        self.history.append(entry)
        self.epochs_completed += 1
        return entry

    def _exact_reporter_entry(self, train_ds):
        """Refit the exact kNN/RF on frozen codes and report its loss/accuracy
        on a held-back slice (diagnostics only; no gradients)."""
        cfg = self.config
        n = len(train_ds)
        ctx = min(4096, n)
        z_ctx = self.model.encode_mu(train_ds.images[:ctx])
        labels_ctx = train_ds.labels[:ctx]
        eval_lo = max(n - min(1024, n), 0)
        z_eval = self.model.encode_mu(train_ds.images[eval_lo:])
        labels_eval = train_ds.labels[eval_lo:]
        clf = fit_exact_reporter(cfg.branch, z_ctx, labels_ctx, cfg.seed)
        probs = clf.predict_probs(z_eval)
        p_true = np.maximum(probs[np.arange(len(labels_eval)), labels_eval], 1e-7)
        return {
            "exact_branch_loss": float(-np.log(p_true).mean()),
            "exact_branch_accuracy": float(np.mean(probs.argmax(axis=1) == labels_eval)),
        }

    # -- parameter/state plumbing ------------------------------------------

    def param_items(self):
        items = list(self.model.param_items())
        if self.branch is not None and self.branch.has_params:
            items += self.branch.param_items()
        return items

    def aux_items(self):
        if self.branch is None:
            return []
        return list(self.branch.aux_state_items())


def train(config, train_ds, target_set=None, trainer=None, checkpoint_path=None,
          log=None):
    """Run (or resume) training to config.epochs; returns the Trainer.

    When ``checkpoint_path`` is set the checkpoint is rewritten after every
    epoch, so after a numeric abort the file holds the last good epoch.
    """
    if config.target_kind is not None and target_set is None:
        raise ConfigError("fixed target mode needs a TargetSet")
    if trainer is None:
        trainer = Trainer(config)
    ds = train_ds.subset(config.train_subset)
    while trainer.epochs_completed < config.epochs:
        entry = trainer.run_epoch(ds, target_set)
        if log is not None:
            log(f"epoch {entry['epoch'] + 1}/{config.epochs} "
                f"total {entry['total']:.3f} recon {entry['recon']:.3f} "
                f"kl {entry['kl']:.3f} branch {entry['branch']:.3f}")
        if checkpoint_path is not None:
            checkpoint_save(trainer, checkpoint_path)
    return trainer


# ---------------------------------------------------------------------------
# probe classifier and full evaluation


def probe_accuracy_on_codes(z_train, train_labels, z_test, test_labels, seed,
                            epochs=PROBE_EPOCHS, return_predictions=False):
    """Train the 512/256/128 probe on frozen codes; return test accuracy."""
    from .branches import MlpBranch  # local import to avoid a cycle at module load

    z_train = np.asarray(z_train, dtype=np.float32)
    z_test = np.asarray(z_test, dtype=np.float32)
    probe = MlpBranch(z_train.shape[1], substream(seed, "probe", 0),
                      hidden=PROBE_HIDDEN)
    adam = Adam(ADAM_LR, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
    labels_hot = one_hot(train_labels)
    n = z_train.shape[0]
    for epoch in range(epochs):
        order = substream(seed, "probe", 1, epoch).permutation(n)
        for lo in range(0, n, PROBE_BATCH):
            idx = order[lo:lo + PROBE_BATCH]
            logits = probe.net.forward(z_train[idx])
            _, grad = softmax_cross_entropy(logits, labels_hot[idx])
            probe.net.backward(grad)
            adam.step([(path, param, g) for (path, param), (_, g)
                       in zip(probe.param_items(), probe.grad_items())])
    preds = np.empty(z_test.shape[0], dtype=np.int64)
    for lo in range(0, z_test.shape[0], 4096):
        preds[lo:lo + 4096] = probe.net.forward(z_test[lo:lo + 4096]).argmax(axis=1)
    accuracy = float(np.mean(preds == np.asarray(test_labels)))
    if return_predictions:
        return accuracy, preds
    return accuracy


def evaluate_probe(model, train_ds, test_ds, seed, epochs=PROBE_EPOCHS,
                   return_predictions=False):
    """Accuracy of a fresh MLP trained on frozen train-split latent means."""
    return probe_accuracy_on_codes(
        model.encode_mu(train_ds.images), train_ds.labels,
        model.encode_mu(test_ds.images), test_ds.labels,
        seed, epochs, return_predictions)


def evaluate_model(model, train_ds, test_ds, seed, restarts=10):
    """Cluster the test latents, score them, and train the probe."""
    z_test = model.encode_mu(test_ds.images)
    partition = kmeans(z_test.astype(np.float64), k=10, restarts=restarts, seed=seed)
    from .metrics import acc as acc_metric
    from .metrics import ari as ari_metric
    from .metrics import nmi as nmi_metric
    probe_accuracy, preds = evaluate_probe(model, train_ds, test_ds, seed,
                                           return_predictions=True)
    return MetricsReport(
        nmi=nmi_metric(test_ds.labels, partition.assignments),
        acc=acc_metric(test_ds.labels, partition.assignments),
        ari=ari_metric(test_ds.labels, partition.assignments),
        probe_accuracy=probe_accuracy,
        confusion=confusion_matrix(test_ds.labels, preds),
    )


# ---------------------------------------------------------------------------
# checkpoints


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_save(trainer, path):
    """Binary checkpoint: magic, u32 version, u64 header length, JSON header,
    raw little-endian float32 blocks (params, Adam m, Adam v, branch aux),
    and a trailing 8-byte blake2b checksum over everything before it."""
    params = trainer.param_items()
    aux = trainer.aux_items()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": trainer.config.to_dict(),
        "config_hash": trainer.config.config_hash(),
        "epochs_completed": trainer.epochs_completed,
        "adam_t": trainer.adam.t,
        "rng": {"scheme": "named-substreams", "master_seed": trainer.config.seed,
                "next_epoch": trainer.epochs_completed},
        "history": trainer.history,
        "params": [{"path": p, "shape": list(a.shape)} for p, a in params],
        "aux": [{"path": p, "shape": list(a.shape)} for p, a in aux],
    }
    header_bytes = _canonical_json(header)
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<Q", len(header_bytes))
    blob += header_bytes
    for _, arr in params:
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    for pth, arr in params:
        m = trainer.adam.m.get(pth)
        blob += np.ascontiguousarray(
            m if m is not None else np.zeros_like(arr), dtype="<f4").tobytes()
    for pth, arr in params:
        v = trainer.adam.v.get(pth)
        blob += np.ascontiguousarray(
            v if v is not None else np.zeros_like(arr), dtype="<f4").tobytes()
    for _, arr in aux:
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    blob += hashlib.blake2b(bytes(blob), digest_size=8).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def checkpoint_load(path):
    """Rebuild a Trainer from a checkpoint file (verifies the checksum)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 12 + 8:
        raise DataError(f"{path}: truncated checkpoint")
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    body, checksum = blob[:-8], blob[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != checksum:
        raise DataError(f"{path}: checksum mismatch, file is corrupt")
    off = len(CHECKPOINT_MAGIC)
    version = struct.unpack_from("<I", body, off)[0]
    off += 4
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header_len = struct.unpack_from("<Q", body, off)[0]
    off += 8
    header = json.loads(body[off:off + header_len].decode())
    off += header_len

    trainer = Trainer(TrainConfig.from_dict(header["config"]))
    trainer.epochs_completed = header["epochs_completed"]
    trainer.history = header["history"]
    trainer.adam.t = header["adam_t"]

    def take(shape):
        nonlocal off
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off)
        off += count * 4
        return arr.reshape(shape).copy()

    params = trainer.param_items()
    if [p for p, _ in params] != [e["path"] for e in header["params"]]:
        raise DataError(f"{path}: parameter layout does not match its config")
    for (_, arr), entry in zip(params, header["params"]):
        arr[:] = take(entry["shape"]).astype(arr.dtype)
    for pth, arr in params:
        trainer.adam.m[pth] = take(arr.shape).astype(arr.dtype)
    for pth, arr in params:
        trainer.adam.v[pth] = take(arr.shape).astype(arr.dtype)
    if header["aux"]:
        blocks = {e["path"]: take(e["shape"]) for e in header["aux"]}
        trainer.branch.load_aux_state(blocks)
    return trainer
