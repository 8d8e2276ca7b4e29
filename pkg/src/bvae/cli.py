"""Command-line front end.

Verbs: train, eval, export, table1..table4, grad-check, metrics-selftest.
The data directory comes from --data or $BVAE_DATA_DIR (default ./data).
Exit codes: 0 ok, 2 configuration problems, 3 data problems, 4 numeric
failures, 1 anything else.
"""

import argparse
import json
import os
import sys

import numpy as np

from .errors import BvaeError, ConfigError, exit_code_for
from .trainer import TrainConfig, checkpoint_load, evaluate_model

DEFAULT_DATA_DIR = "data"
ENV_DATA_DIR = "BVAE_DATA_DIR"


def _data_dir(args):
    return args.data or os.environ.get(ENV_DATA_DIR) or DEFAULT_DATA_DIR


def _parse_overrides(pairs):
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _load_config(args):
    fields = {}
    if args.config:
        try:
            with open(args.config) as fh:
                fields = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    fields.update(_parse_overrides(args.set))
    if args.seed is not None:
        fields["seed"] = args.seed
    try:
        cfg = TrainConfig.from_dict(fields)
    except TypeError as exc:
        raise ConfigError(f"unknown config field: {exc}") from exc
    if args.quick:
        from dataclasses import replace

        from .experiments import QUICK_EPOCHS, QUICK_SUBSET
        cfg = replace(cfg, train_subset=QUICK_SUBSET, epochs=QUICK_EPOCHS)
    return cfg


def _cmd_train(args):
    from .experiments import _prepare_out_dir, run_single
    cfg = _load_config(args)
    _prepare_out_dir(args.out, args.force)
    _, report = run_single(cfg, _data_dir(args), args.out, log=_log)
    _log(f"nmi={report.nmi:.4f} acc={report.acc:.4f} ari={report.ari:.4f} "
         f"classification_accuracy={report.probe_accuracy:.4f}")
    return 0


def _cmd_eval(args):
    from .experiments import load_split
    trainer = checkpoint_load(args.checkpoint)
    cfg = trainer.config
    data_dir = _data_dir(args)
    train_ds = load_split(data_dir, cfg.dataset, "train", cfg.seed)
    test_ds = load_split(data_dir, cfg.dataset, "test", cfg.seed)
    report = evaluate_model(trainer.model, train_ds.subset(cfg.train_subset),
                            test_ds, cfg.seed)
    payload = {"config_hash": cfg.config_hash(), "seed": cfg.seed,
               "metrics": report.as_dict()}
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
    _log(json.dumps(payload["metrics"], sort_keys=True))
    return 0


def _cmd_export(args):
    from .experiments import (
        export_confusion,
        export_decoder_grid,
        export_latent_scatter,
        export_sampled_reconstruction,
        load_split,
    )
    trainer = checkpoint_load(args.checkpoint)
    cfg = trainer.config
    if args.what == "grid":
        export_decoder_grid(trainer, args.out)
        return 0
    if args.what == "reconstruction":
        if not args.z:
            raise ConfigError("export reconstruction needs --z, e.g. --z 0.5,-1.0")
        z = [float(v) for v in args.z.split(",")]
        export_sampled_reconstruction(trainer, z, args.out)
        return 0
    data_dir = _data_dir(args)
    test_ds = load_split(data_dir, cfg.dataset, "test", cfg.seed)
    if args.what == "scatter":
        export_latent_scatter(trainer, test_ds, args.out)
        return 0
    if args.what == "confusion":
        train_ds = load_split(data_dir, cfg.dataset, "train", cfg.seed)
        base, ext = os.path.splitext(args.out)
        export_confusion(trainer, train_ds.subset(cfg.train_subset), test_ds,
                         args.out if ext == ".csv" else base + ".csv",
                         base + ".pgm")
        return 0
    raise ConfigError(f"unknown export kind {args.what!r}")


def _cmd_table(args, preset_name):
    from .experiments import PRESETS, run_experiment
    spec = PRESETS[preset_name](args.seed if args.seed is not None else 0)
    summary = run_experiment(spec, _data_dir(args), args.out, force=args.force,
                             quick=args.quick, repeats=args.repeats, log=_log)
    _log(f"wrote {summary}")
    return 0


def _cmd_grad_check(args):
    from .verify import gradient_battery
    results = gradient_battery(seed=args.seed if args.seed is not None else 0)
    failed = 0
    for name, (err, tol) in results.items():
        status = "PASS" if err <= tol else "FAIL"
        failed += status == "FAIL"
        _log(f"{status} {name}: max_rel_err={err:.3e} (tol {tol:.0e})")
    if failed:
        from .errors import EXIT_NUMERIC
        _log(f"{failed} gradient checks failed")
        return EXIT_NUMERIC
    return 0


def _cmd_metrics_selftest(args):
    from .verify import metrics_selftest
    results = metrics_selftest(seed=args.seed if args.seed is not None else 0)
    failed = 0
    for name, ok in results.items():
        failed += not ok
        _log(f"{'PASS' if ok else 'FAIL'} {name}")
    if failed:
        from .errors import EXIT_NUMERIC
        return EXIT_NUMERIC
    return 0


def _log(message):
    print(message, flush=True)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bvae",
        description="Train and evaluate branched variational autoencoders on MNIST.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--seed", type=int, default=None)
        if data:
            p.add_argument("--data", default=None,
                           help=f"IDX data directory (default ${ENV_DATA_DIR} or ./data)")

    p = sub.add_parser("train", help="train one configuration")
    common(p)
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field (JSON-parsed value)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--quick", action="store_true",
                   help="10000-sample / 10-epoch smoke profile")
    p.add_argument("--force", action="store_true", help="overwrite outputs")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="write metrics JSON here")

    p = sub.add_parser("export", help="export figure data from a checkpoint")
    common(p)
    p.add_argument("what", choices=["scatter", "grid", "confusion", "reconstruction"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--z", help="latent point for reconstruction, e.g. 0.5,-1.0")

    for name in ("table1", "table2", "table3", "table4"):
        p = sub.add_parser(name, help=f"run the {name} experiment preset")
        common(p)
        p.add_argument("--out", required=True)
        p.add_argument("--repeats", type=int, default=None,
                       help="override the preset repeat count (default 3)")
        p.add_argument("--quick", action="store_true")
        p.add_argument("--force", action="store_true")

    p = sub.add_parser("grad-check", help="finite-difference gradient battery")
    common(p, data=False)

    p = sub.add_parser("metrics-selftest", help="clustering-metric oracle battery")
    common(p, data=False)
    return parser


def main(argv=None):
    np.seterr(over="ignore")  # float32 training saturates cleanly through clamps
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "export": _cmd_export,
        "grad-check": _cmd_grad_check,
        "metrics-selftest": _cmd_metrics_selftest,
    }
    try:
        if args.command in handlers:
            return handlers[args.command](args)
        return _cmd_table(args, args.command)
    except BvaeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
