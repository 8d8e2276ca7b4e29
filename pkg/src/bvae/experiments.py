"""Experiment presets, the run/aggregate driver, and figure-data exporters.

Every run writes a self-describing report.json (config, config hash, seed,
package version, metrics, loss history); the aggregate summary.csv holds
the per-variant means over repeats.  Image exports use binary 8-bit PGM,
numeric exports CSV with `# key=value` metadata comment lines — both
byte-deterministic for a given checkpoint.
"""

import csv
import io
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .branches import BranchSpec
from .data.dataset import load_cache, load_mnist, make_rotated_dataset, save_cache, verify_checksums
from .data.targets import make_target_set
from .errors import ConfigError, DataError
from .model import decoder_grid
from .trainer import (
    TrainConfig,
    checkpoint_save,
    evaluate_model,
    evaluate_probe,
    train,
)

QUICK_SUBSET = 10000
QUICK_EPOCHS = 10

GRID_STEPS = 30
GRID_RANGE = (-3.0, 3.0)


@dataclass
class ExperimentSpec:
    name: str
    variants: list                      # [(variant_name, TrainConfig), ...]
    repeats: int = 3
    base_seed: int = 0
    description: str = ""

    def __post_init__(self):
        names = [n for n, _ in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate variant names in experiment {self.name!r}")


def _mlp(weight):
    return dict(branch=BranchSpec("mlp"), branch_weight=weight)


def preset_table1(seed=0):
    """Plain vs fixed-output vs branched frameworks on unrotated digits."""
    mk = lambda **kw: TrainConfig(dataset="mnist", latent_dim=2, **kw)  # noqa: E731
    return ExperimentSpec(
        name="table1",
        base_seed=seed,
        description="clustering metrics and probe accuracy, unrotated digits, k=2",
        variants=[
            ("vae", mk()),
            ("vae_fixed", mk(target_mode="fixed:exemplar")),
            ("bvae_lambda10", mk(**_mlp(10.0))),
            ("bvae_lambda100", mk(**_mlp(100.0))),
            ("bvae_alpha001", mk(recon_weight=0.01, **_mlp(1.0))),
            ("bvae_fixed", mk(target_mode="fixed:exemplar", **_mlp(100.0))),
        ],
    )


def preset_table2(seed=0):
    """Fixed-output variants: exemplar digits vs synthetic target shapes."""
    mk = lambda **kw: TrainConfig(dataset="mnist", latent_dim=2, **kw)  # noqa: E731
    return ExperimentSpec(
        name="table2",
        base_seed=seed,
        description="fixed-output target families, unrotated digits, k=2",
        variants=[
            ("fixed_exemplar", mk(target_mode="fixed:exemplar")),
            ("fixed_gaussian", mk(target_mode="fixed:gaussian")),
            ("fixed_square", mk(target_mode="fixed:square")),
            ("fixed_wavelet", mk(target_mode="fixed:wavelet")),
        ],
    )


def preset_table3(seed=0):
    """Same grid as table1 on randomly rotated digits."""
    spec = preset_table1(seed)
    variants = [(name, replace(cfg, dataset="mnist_rotated"))
                for name, cfg in spec.variants]
    return ExperimentSpec(name="table3", variants=variants, base_seed=seed,
                          description="table1 frameworks on rotated digits")


def preset_table4(seed=0):
    """Latent dimension sweep on rotated digits."""
    mk = lambda **kw: TrainConfig(dataset="mnist_rotated", **kw)  # noqa: E731
    variants = []
    for k in (2, 3, 5, 10):
        variants.append((f"vae_k{k}", mk(latent_dim=k)))
        variants.append((f"vae_fixed_k{k}", mk(latent_dim=k, target_mode="fixed:exemplar")))
        variants.append((f"bvae_k{k}", mk(latent_dim=k, **_mlp(100.0))))
    return ExperimentSpec(name="table4", variants=variants, base_seed=seed,
                          description="latent dimensions 2/3/5/10, rotated digits")


PRESETS = {
    "table1": preset_table1,
    "table2": preset_table2,
    "table3": preset_table3,
    "table4": preset_table4,
}


# ---------------------------------------------------------------------------
# data plumbing


def load_split(data_dir, dataset, split, seed, cache_dir=None):
    """Load a split, applying seeded per-sample rotation for mnist_rotated.

    Rotated splits are cached (raw f32 + JSON sidecar) because rotating
    60k images costs more than reloading them.
    """
    ds = load_mnist(data_dir, split)
    if dataset == "mnist":
        return ds
    stem = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        stem = os.path.join(cache_dir, f"mnist_rotated_{split}_seed{seed}")
        if os.path.exists(stem + ".json") and os.path.exists(stem + ".bin"):
            return load_cache(stem)
    rotated = make_rotated_dataset(ds, seed)
    if stem is not None:
        save_cache(rotated, stem)
    return rotated


# ---------------------------------------------------------------------------
# exporters


def write_pgm(path, image, metadata=None):
    """Binary 8-bit PGM; metadata lands in `# key=value` comment lines."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    lines = [b"P5"]
    for key, value in (metadata or {}).items():
        lines.append(f"# {key}={value}".encode())
    lines.append(f"{img.shape[1]} {img.shape[0]}".encode())
    lines.append(b"255")
    with open(path, "wb") as fh:
        fh.write(b"\n".join(lines) + b"\n")
        fh.write(img.tobytes())


def read_pgm(path):
    """Read back a PGM written by write_pgm; returns (image, metadata)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = []
    metadata = {}
    off = 0
    while len(lines) < 3:
        end = raw.index(b"\n", off)
        line = raw[off:end]
        off = end + 1
        if line.startswith(b"#"):
            if b"=" in line:
                key, value = line[2:].decode().split("=", 1)
                metadata[key] = value
            continue
        lines.append(line)
    if lines[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    width, height = (int(v) for v in lines[1].split())
    img = np.frombuffer(raw[off:off + width * height], dtype=np.uint8)
    return img.reshape(height, width), metadata


def _metadata(trainer, extra=None):
    meta = {"config_hash": trainer.config.config_hash(),
            "seed": trainer.config.seed, "version": __version__}
    if extra:
        meta.update(extra)
    return meta


def _write_csv(path, comment_meta, header, rows):
    buf = io.StringIO()
    for key, value in comment_meta.items():
        buf.write(f"# {key}={value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def export_latent_scatter(trainer, test_ds, out_path):
    """CSV of (z1, z2, label) per test sample; first two dims when k > 2."""
    codes = trainer.model.encode_mu(test_ds.images)
    meta = _metadata(trainer, {"latent_dim": trainer.config.latent_dim,
                               "columns": "first-two-of-k" if codes.shape[1] > 2
                               else "full-latent"})
    rows = [(f"{z[0]:.6f}", f"{z[1]:.6f}", int(label))
            for z, label in zip(codes, test_ds.labels)]
    _write_csv(out_path, meta, ["z1", "z2", "label"], rows)


def export_decoder_grid(trainer, out_path):
    """840x840 PGM tiling the 30x30 decoded lattice over [-3, 3]^2."""
    grid = decoder_grid(trainer.model, GRID_RANGE, GRID_STEPS)
    h, w = grid.shape[1:]
    tiled = (grid.reshape(GRID_STEPS, GRID_STEPS, h, w)
             .transpose(0, 2, 1, 3).reshape(GRID_STEPS * h, GRID_STEPS * w))
    write_pgm(out_path, tiled, _metadata(trainer, {
        "grid": f"{GRID_STEPS}x{GRID_STEPS}",
        "range": f"{GRID_RANGE[0]}..{GRID_RANGE[1]}",
        "order": "top-left=(z1=-3,z2=+3); z1 grows rightward, z2 shrinks downward",
    }))


def export_confusion(trainer, train_ds, test_ds, out_csv, out_pgm, seed=None):
    """Probe confusion matrix as CSV counts plus a rendered PGM heat map."""
    from .metrics import confusion_matrix

    seed = trainer.config.seed if seed is None else seed
    accuracy, preds = evaluate_probe(trainer.model, train_ds, test_ds, seed,
                                     return_predictions=True)
    table = confusion_matrix(test_ds.labels, preds)
    meta = _metadata(trainer, {"probe_accuracy": f"{accuracy:.6f}"})
    _write_csv(out_csv, meta, ["true\\pred"] + [str(c) for c in range(10)],
               [[str(r)] + [int(v) for v in table[r]] for r in range(10)])
    scale = table / max(table.max(), 1)
    rendered = np.kron(scale, np.ones((16, 16)))
    write_pgm(out_pgm, rendered, meta)
    return table, accuracy


def export_sampled_reconstruction(trainer, z_point, out_path):
    """Decode one latent point to a 28x28 PGM."""
    z = np.asarray(z_point, dtype=np.float32).reshape(1, -1)
    if z.shape[1] != trainer.config.latent_dim:
        raise ConfigError(f"z has {z.shape[1]} dims, model wants "
                          f"{trainer.config.latent_dim}")
    image = trainer.model.decode(z)[0, :, :, 0]
    write_pgm(out_path, image, _metadata(trainer, {
        "z": ",".join(f"{v:.6f}" for v in z.ravel())}))


# ---------------------------------------------------------------------------
# experiment driver


def _prepare_out_dir(path, force):
    if os.path.exists(path) and os.listdir(path) and not force:
        raise ConfigError(f"output directory {path} is not empty; pass --force "
                          f"to overwrite")
    os.makedirs(path, exist_ok=True)


def run_single(config, data_dir, out_dir, log=None, cache_dir=None):
    """Train one config against the on-disk dataset and write its report."""
    os.makedirs(out_dir, exist_ok=True)
    train_ds = load_split(data_dir, config.dataset, "train", config.seed, cache_dir)
    test_ds = load_split(data_dir, config.dataset, "test", config.seed, cache_dir)
    target_set = None
    if config.target_kind is not None:
        target_set = make_target_set(config.target_kind, train_ds, config.seed)
    ckpt_path = os.path.join(out_dir, "checkpoint.bvae")
    trainer = train(config, train_ds, target_set, checkpoint_path=ckpt_path, log=log)
    checkpoint_save(trainer, ckpt_path)
    report = evaluate_model(trainer.model, train_ds.subset(config.train_subset),
                            test_ds, config.seed)
    payload = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "version": __version__,
        "metrics": report.as_dict(),
        "history": trainer.history,
    }
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
    return trainer, report


def run_experiment(spec, data_dir, out_root, force=False, quick=False,
                   repeats=None, log=None):
    """Train every variant x repeat, then aggregate means into summary.csv."""
    out_dir = os.path.join(out_root, spec.name)
    _prepare_out_dir(out_dir, force)
    verify_checksums(data_dir)
    # fail fast if the data is missing before burning hours of training
    load_mnist(data_dir, "train")
    repeats = spec.repeats if repeats is None else repeats
    cache_dir = os.path.join(out_root, "cache")
    summary_rows = []
    for variant_name, base_cfg in spec.variants:
        per_run = []
        for r in range(repeats):
            cfg = replace(base_cfg, seed=spec.base_seed + r)
            if quick:
                cfg = replace(cfg, train_subset=QUICK_SUBSET, epochs=QUICK_EPOCHS)
            run_dir = os.path.join(out_dir, variant_name, f"run{r}")
            if log:
                log(f"[{spec.name}] {variant_name} run {r + 1}/{repeats} "
                    f"(seed {cfg.seed})")
            _, report = run_single(cfg, data_dir, run_dir, log=log,
                                   cache_dir=cache_dir)
            per_run.append(report)
        summary_rows.append([
            variant_name,
            f"{np.mean([m.nmi for m in per_run]):.6f}",
            f"{np.mean([m.acc for m in per_run]):.6f}",
            f"{np.mean([m.ari for m in per_run]):.6f}",
            f"{np.mean([m.probe_accuracy for m in per_run]):.6f}",
            str(len(per_run)),
        ])
    _write_csv(os.path.join(out_dir, "summary.csv"),
               {"experiment": spec.name, "base_seed": spec.base_seed,
                "repeats": repeats, "version": __version__},
               ["variant", "nmi", "acc", "ari", "classification_accuracy", "runs"],
               summary_rows)
    return os.path.join(out_dir, "summary.csv")
