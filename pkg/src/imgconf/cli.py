"""Command-line entry point: ``imgconf {simulate,train,estimate,sweep,check}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dgp, estimators, experiments, identification, model, storage
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("imgconf")


class CliError(Exception):
    pass


def _readout(level: str) -> str:
    return "pixel" if level == "pixel" else "scene"


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    out = storage.prepare_out_dir(args.out, args.force)
    started = storage.now()
    sample = dgp.simulate(cfg.dgp, index=args.index)
    storage.save_sample(sample, out, {"seed": cfg.seed, "config_hash": cfg.hash(), "index": args.index,
                                      "dgp": cfg.canonical()["dgp"]})
    storage.write_manifest(out, "simulate", cfg.canonical(), cfg.hash(), cfg.seed, started)
    log.info("wrote %d units to %s", sample.n_units, out)
    return 0


def _new_model(cfg: RunConfig, level: str, shape) -> model.ConvLogisticModel:
    _, h, w, c = shape
    pools = cfg.model.pools(h, w) if level == "scene" else [1] * cfg.model.depth
    rng = dgp.replication_rng(cfg.seed, 0, dgp.STREAM_TRAIN)
    return model.init_model(cfg.estimating_kernel_width, cfg.model.n_filters, c, cfg.model.depth, pools, rng=rng)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    sample, info = storage.load_sample(args.sample)
    readout = _readout(sample.level)
    targets = sample.treatment_grid()
    if np.all(targets == targets.flat[0]):
        raise CliError("single-class sample: every unit has T=%d, nothing to learn" % targets.flat[0])
    out = storage.prepare_out_dir(args.out, args.force)
    started = storage.now()
    init = _new_model(cfg, sample.level, sample.images.shape)
    if args.grad_check:
        batch = sample.images[:16]
        err = model.gradient_check(init, batch, targets[:16], readout)
        print(f"gradient check: max relative error {err:.3e} over {sum(p.size for p in init.parameters())} parameters")
        if not err < 1e-4:
            raise CliError(f"gradient check failed: {err:.3e} >= 1e-4")
    images, test = sample.images, None
    if args.holdout > 0:
        n = images.shape[0]
        n_test = int(round(args.holdout * n))
        if not 0 < n_test < n:
            raise CliError(f"holdout {args.holdout} leaves an empty train or test split over {n} scenes")
        order = dgp.replication_rng(cfg.seed, 0, dgp.STREAM_TRAIN).permutation(n)
        test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
        images, test = sample.images[train_idx], (sample.images[test_idx], targets[test_idx])
        targets = targets[train_idx]
    result = model.train(init, images, targets, cfg.train, readout=readout, test=test)
    model.save_model(result.model, out / "model.bin")
    storage.write_loss_trace(result.trace, out / "loss_trace.csv")
    storage.write_manifest(out, "train", cfg.canonical(), cfg.hash(), cfg.seed, started,
                           {"sample": str(args.sample), "sample_config_hash": info.get("config_hash")})
    print(f"final loss {result.final_loss:.6f} (initial {result.initial_loss:.6f})")
    return 0


def _model_path(path: str) -> Path:
    p = Path(path)
    return p / "model.bin" if p.is_dir() else p


def cmd_estimate(args) -> int:
    sample, info = storage.load_sample(args.sample)
    names = [estimators.ALIASES.get(n.strip(), n.strip()) for n in args.estimators.split(",") if n.strip()]
    for n in names:
        if n not in estimators.ESTIMATORS:
            raise CliError(f"unknown estimator {n!r}; choose from diff, ht, hajek")
    needs_p = any(n != "diff_means" for n in names)
    if args.oracle and args.model:
        raise CliError("give either --oracle or --model, not both")
    pihat, source = None, "none"
    if args.oracle:
        pihat, source = sample.true_propensity, "oracle"
    elif args.model:
        fitted = model.load_model(_model_path(args.model))
        pihat = model.predict_propensities(fitted, sample.images, _readout(sample.level), args.eta).ravel()
        source = "learned"
    elif needs_p:
        raise CliError("IPW estimators need a propensity source: pass --oracle or --model PATH")
    results = [estimators.run_estimator(n, sample.treatment, sample.outcome, pihat, source) for n in names]
    seed, config_id = info.get("seed", ""), info.get("config_hash", "")
    if args.out:
        estimators.append_results_csv(args.out, results, seed, config_id)
    else:
        print(",".join(estimators.RESULT_COLUMNS))
        for r in results:
            print(f"{r.estimator},{r.source},{float(r.tau_hat)!r},{r.n_units},{r.ess_treated!r},{r.ess_control!r},{seed},{config_id}")
    return 0


def cmd_check(args) -> int:
    ok, lines = identification.check_identification(args.worlds, args.seed)
    for line in lines:
        print(line)
    return 0 if ok else 1


def cmd_sweep(args) -> int:
    status = 0
    if args.check_identification:
        status = cmd_check(argparse.Namespace(worlds=100, seed=0))
    if args.config is None:
        if not args.check_identification:
            raise CliError("sweep needs a config path and an output directory")
        return status
    if args.out is None:
        raise CliError("sweep needs an output directory")
    cfg = load_config(args.config)
    spec = cfg.spec()
    out = storage.prepare_out_dir(args.out, args.force)
    started = storage.now()
    threads = args.threads or os.cpu_count() or 1
    report = experiments.sweep(spec, threads=threads)
    experiments.write_metrics_csv(report, out / "metrics.csv")
    experiments.write_plot_csv(report, out / "plot.csv")
    failures = sum(len(p.failures) for p in report.points)
    storage.write_manifest(out, "sweep", cfg.canonical(), cfg.hash(), cfg.seed, started,
                           {"threads": threads, "failed_replications": failures})
    for point in report.points:
        for key, m in point.metrics.items():
            print(f"{spec.sweep}={point.grid_value} {key}: rel_bias={m.rel_bias:.4f} (se {m.se_rel_bias:.4f}) rmse={m.rmse:.4f}")
    return status


def build_parser() -> argparse.ArgumentParser:
    from . import __version__

    parser = argparse.ArgumentParser(prog="imgconf", description=__doc__)
    parser.add_argument("--version", action="version", version=f"imgconf {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw one confounded sample")
    p.add_argument("config")
    p.add_argument("out")
    p.add_argument("--index", type=int, default=0, help="replication index (default 0)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit the convolutional propensity model on a sample")
    p.add_argument("sample")
    p.add_argument("config")
    p.add_argument("out")
    p.add_argument("--grad-check", action="store_true", help="finite-difference check before training")
    p.add_argument("--holdout", type=float, default=0.0, help="fraction of scenes held out for the test loss")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="estimate the ATE on a sample")
    p.add_argument("sample")
    p.add_argument("--model", help="checkpoint file or train output directory")
    p.add_argument("--oracle", action="store_true", help="use the true propensities")
    p.add_argument("--estimators", default="diff,ht,hajek")
    p.add_argument("--eta", type=float, default=0.01, help="clip learned propensities to [eta, 1-eta]")
    p.add_argument("--out", help="append rows to this CSV instead of printing")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("sweep", help="Monte Carlo sweep from a config")
    p.add_argument("config", nargs="?")
    p.add_argument("out", nargs="?")
    p.add_argument("--threads", type=int, default=0, help="worker processes (default: all cores)")
    p.add_argument("--check-identification", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check", help="exact identification checks on small image spaces")
    p.add_argument("--worlds", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CliError, storage.OutputExistsError, FileNotFoundError, ValueError) as exc:
        print(f"imgconf {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
