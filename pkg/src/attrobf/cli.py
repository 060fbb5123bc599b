"""Command-line pipeline: ``attrobf {gen-data,train,perturb,sweep,report,grid}``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .data import SyntheticSpec, generate_synthetic, load_manifest, split, write_manifest
from .evaluate import (CleanModelSpec, VARIANT_WIDTHS, build_model, emit_report, evaluate_accuracy,
                       export_image_grid, load_report, parse_grid, report_csv, report_json, run_sweep)
from .exceptions import ConfigError, DatasetError, ModelFormatError, NonFiniteError
from .model import TrainConfig, load_model, save_model
from .perturb import AttackConfig, check_perturbation, perturb_dataset

logger = logging.getLogger("attrobf")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

ROLES = {"surrogate": ("A", 1), "clean-a": ("A", 2), "clean-b": ("B", 3)}


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=False)
        f.write("\n")


def _threads(n):
    if not n or n <= 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _train_cfg(args, seed):
    return TrainConfig(args.epochs, args.batch_size, args.lr, args.momentum, args.alpha1, args.alpha2,
                       seed).validate()


def cmd_gen_data(args):
    spec = SyntheticSpec(n=args.n, seed=args.seed, noise_sigma=args.noise_sigma)
    ds = generate_synthetic(spec)
    write_manifest(ds, args.out, args.format)
    counts = np.zeros((spec.k_hidden, spec.k_public), dtype=int)
    np.add.at(counts, (ds.hidden, ds.public), 1)
    _write_json(os.path.join(args.out, "gen-data.json"),
                {"command": "gen-data", "config": asdict(spec), "format": args.format,
                 "cell_counts": counts.tolist()})
    print(f"wrote {len(ds)} samples to {args.out}")
    for h in range(spec.k_hidden):
        print(f"hidden={h}: " + " ".join(f"public={p}:{counts[h, p]}" for p in range(spec.k_public)))
    return EXIT_OK


def cmd_train(args):
    variant, default_seed = ROLES[args.role]
    seed = default_seed if args.seed is None else args.seed
    cfg = _train_cfg(args, seed)
    train = load_manifest(args.data)
    if len(train) == 0:
        raise ConfigError(f"{args.data} contains no samples")
    model = build_model(VARIANT_WIDTHS[variant], cfg)
    model.fit(train.images, train.labels)
    for rec in model.history_:
        print(f"epoch {rec['epoch']}: loss {rec['loss']:.6f} hidden_acc {rec['hidden_acc']:.4f} "
              f"public_acc {rec['public_acc']:.4f}")
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_model(model, args.out)
    side = {"command": "train", "role": args.role, "variant": variant, "config": asdict(cfg),
            "data": args.data, "history": model.history_}
    if args.role != "surrogate":
        eval_set = load_manifest(args.test_data) if args.test_data else train
        h, p = evaluate_accuracy(model, eval_set)
        side["baseline"] = {"hidden_acc": h, "public_acc": p,
                            "split": "test" if args.test_data else "train",
                            "data": args.test_data or args.data}
        print(f"baseline hidden_acc {h:.4f} public_acc {p:.4f}")
    _write_json(args.out + ".json", side)
    return EXIT_OK


def cmd_perturb(args):
    cfg = AttackConfig(args.method, args.epsilon, args.steps, args.step_size, args.alpha1,
                       args.alpha2).validate()
    model = load_model(args.model)
    ds = load_manifest(args.data, model.n_hidden_classes, model.n_public_classes, model.image_size)
    out, diag = perturb_dataset(model, ds, cfg)
    violations = check_perturbation(ds.images, out.images, cfg.epsilon)
    if violations:
        raise NonFiniteError(f"post-check found {violations} constraint violations")
    write_manifest(out, args.out, args.format)
    _write_json(os.path.join(args.out, "perturb.json"),
                {"command": "perturb", "config": cfg.to_dict(), "model": args.model, "data": args.data,
                 "post_check": {"violations": violations, "max_linf": float(diag["linf"].max(initial=0.0))}})
    print(f"perturbed {len(out)} samples ({cfg.method}, epsilon={cfg.epsilon}); "
          f"max linf {float(diag['linf'].max(initial=0.0)):.6f}, violations {violations}")
    return EXIT_OK


def _sweep_data(cfg):
    base = os.path.join(cfg.out_dir, "data")
    if cfg.data_dir:
        train = load_manifest(cfg.data_dir)
        if cfg.test_data_dir:
            return train, load_manifest(cfg.test_data_dir)
        return split(train, cfg.n_train / (cfg.n_train + cfg.n_test), cfg.split_seed)
    full = generate_synthetic(SyntheticSpec(n=cfg.n_train + cfg.n_test, seed=cfg.data_seed,
                                            noise_sigma=cfg.noise_sigma))
    train, test = split(full, cfg.n_train / (cfg.n_train + cfg.n_test), cfg.split_seed)
    write_manifest(train, os.path.join(base, "train"), cfg.image_format)
    write_manifest(test, os.path.join(base, "test"), cfg.image_format)
    # reload so every stage sees the same 8-bit pixels a separate run would
    return load_manifest(os.path.join(base, "train")), load_manifest(os.path.join(base, "test"))


def _sweep_model(cfg, role, path, train, variant, seed):
    if path:
        return load_model(path)
    tcfg = TrainConfig(cfg.epochs, cfg.batch_size, cfg.lr, cfg.momentum, cfg.train_alpha1,
                       cfg.train_alpha2, seed).validate()
    logger.info("training %s (variant %s, seed %d)", role, variant, seed)
    model = build_model(VARIANT_WIDTHS[variant], tcfg).fit(train.images, train.labels)
    mdir = os.path.join(cfg.out_dir, "models")
    os.makedirs(mdir, exist_ok=True)
    save_model(model, os.path.join(mdir, f"{role}.fob"))
    return model


def cmd_sweep(args):
    overrides = {k: v for k, v in vars(args).items() if k in RunConfig.__dataclass_fields__ and v is not None}
    cfg = load_config(args.config, overrides)
    grid = parse_grid(cfg.grid, cfg.alpha1, cfg.alpha2)
    for method, eps, a1, a2 in grid:
        AttackConfig(method, eps, cfg.steps, cfg.step_size, a1, a2).validate()
    variants = cfg.variants()
    seeds = {"A": cfg.clean_a_seed, "B": cfg.clean_b_seed}
    if cfg.surrogate_seed in seeds.values():
        raise ConfigError("clean model seeds must differ from surrogate_seed")
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.txt"), "w") as f:
        f.write(cfg.to_text())
    # wall-clock seconds per stage; kept out of the report so the report stays reproducible
    timings = {}
    with _threads(cfg.threads):
        t0 = time.perf_counter()
        train, test = _sweep_data(cfg)
        timings["data"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        surrogate = _sweep_model(cfg, "surrogate", cfg.surrogate_model, train, "A", cfg.surrogate_seed)
        timings["train_surrogate"] = time.perf_counter() - t0
        paths = {"A": cfg.clean_a_model, "B": cfg.clean_b_model}
        clean = {}
        for v in variants:
            t0 = time.perf_counter()
            clean[v] = _sweep_model(cfg, f"clean-{v.lower()}", paths[v], train, v, seeds[v])
            timings[f"train_clean_{v.lower()}"] = time.perf_counter() - t0

        def save(acfg, perturbed):
            name = f"{acfg.method}_{acfg.epsilon:g}"
            k = min(cfg.grid_count, len(test))
            gdir = os.path.join(cfg.out_dir, "grids")
            os.makedirs(gdir, exist_ok=True)
            export_image_grid([(test.images[i], perturbed.images[i]) for i in range(k)],
                              os.path.join(gdir, f"{name}.png"), columns=k)
            if cfg.save_perturbed:
                write_manifest(perturbed, os.path.join(cfg.out_dir, "perturbed", name), cfg.image_format)

        t0 = time.perf_counter()
        report = run_sweep(surrogate, clean, test, grid, cfg.steps, cfg.step_size,
                           config={k: v for k, v in asdict(cfg).items()}, on_perturbed=save)
        timings["sweep"] = time.perf_counter() - t0
    _write_json(os.path.join(cfg.out_dir, "timings.json"), timings)
    emit_report(report, os.path.join(cfg.out_dir, "report.csv"), "csv")
    emit_report(report, os.path.join(cfg.out_dir, "report.json"), "json")
    sys.stdout.write(report_csv(report))
    ok = sum(r.ok for r in report.rows)
    if ok == 0:
        logger.error("every sweep row failed")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_report(args):
    report = load_report(args.input)
    text = report_csv(report) if args.format == "csv" else report_json(report)
    if args.out:
        with open(args.out, "w", newline="") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_grid(args):
    clean = load_manifest(args.data_clean)
    pert = load_manifest(args.data_perturbed)
    if clean.ids != pert.ids:
        raise ConfigError("clean and perturbed manifests list different sample ids")
    k = min(args.count, len(clean))
    if k < 1:
        raise ConfigError("grid needs at least one sample")
    export_image_grid([(clean.images[i], pert.images[i]) for i in range(k)], args.out, columns=k)
    print(f"wrote {k}-column grid to {args.out}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=RunConfig.epochs, help="training epochs")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="mini-batch size")
    p.add_argument("--lr", type=float, default=RunConfig.lr, help="SGD learning rate")
    p.add_argument("--momentum", type=float, default=d.momentum, help="SGD momentum")
    p.add_argument("--alpha1", type=float, default=1.0, help="hidden-head loss weight")
    p.add_argument("--alpha2", type=float, default=1.0, help="public-head loss weight")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="attrobf", description=__doc__, formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic manifest dataset", formatter_class=fmt)
    p.add_argument("--n", type=int, default=5000, help="number of samples")
    p.add_argument("--seed", type=int, default=7, help="generator seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--noise-sigma", type=float, default=0.05, help="pixel noise std")
    p.add_argument("--format", choices=("png", "ppm"), default="png", help="image file format")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a surrogate or clean model", formatter_class=fmt)
    p.add_argument("--data", required=True, help="training manifest directory")
    p.add_argument("--role", choices=sorted(ROLES), default="surrogate",
                   help="surrogate/clean-a use the 3-block trunk, clean-b the 4-block trunk")
    p.add_argument("--seed", type=int, default=None, help="seed; None picks 1, 2 or 3 by role")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--test-data", default=None, help="manifest for the clean baseline accuracies")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("perturb", help="perturb a manifest dataset against a surrogate", formatter_class=fmt)
    p.add_argument("--model", required=True, help="surrogate model file")
    p.add_argument("--data", required=True, help="input manifest directory")
    p.add_argument("--method", choices=("fgsm", "pgd"), default="pgd", help="attack method")
    p.add_argument("--epsilon", type=float, default=0.2, help="l-infinity radius on [0, 1] pixels")
    p.add_argument("--alpha1", type=float, default=1.0, help="hidden-objective weight")
    p.add_argument("--alpha2", type=float, default=1.0, help="public-preservation weight")
    p.add_argument("--steps", type=int, default=40, help="PGD iterations")
    p.add_argument("--step-size", type=float, default=None, help="PGD step; None means 2.5*epsilon/steps")
    p.add_argument("--out", required=True, help="output manifest directory")
    p.add_argument("--format", choices=("png", "ppm"), default="png", help="image file format")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("sweep", help="run the full method x epsilon x clean-model sweep", formatter_class=fmt)
    p.add_argument("--config", default=None, help="key = value config file")
    defaults = RunConfig()
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        flags = [flag] if flag == "--" + f.name else [flag, "--" + f.name]
        p.add_argument(*flags, dest=f.name, default=None, metavar="VALUE",
                       help=f"override config key {f.name} (default: {getattr(defaults, f.name)!r})")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="re-render a sweep report", formatter_class=fmt)
    p.add_argument("--in", dest="input", required=True, help="report.json from a sweep")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="output format")
    p.add_argument("--out", default=None, help="output file; None writes to stdout")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("grid", help="write an original-vs-perturbed image grid", formatter_class=fmt)
    p.add_argument("--data-clean", required=True, help="clean manifest directory")
    p.add_argument("--data-perturbed", required=True, help="perturbed manifest directory")
    p.add_argument("--out", required=True, help="PNG file to write")
    p.add_argument("--count", type=int, default=8, help="number of pairs (grid columns)")
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteError as e:
        print(f"error: numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError, ModelFormatError, OSError) as e:
        code = EXIT_CONFIG if isinstance(e, ConfigError) else EXIT_IO
        print(f"error: {e}", file=sys.stderr)
        return code
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
