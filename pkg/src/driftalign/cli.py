"""Command-line front end.

Subcommands cover the full workflow: synthesize data, train the frozen
source model, extract its reference statistics, run adaptation over a
corrupted stream, compare finished runs, and render figures. Exit codes:
0 success, 2 configuration or file-format problem, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import datasets, source
from .config import ConfigError, load_config
from .corruptions import UnknownCorruptionError
from .engine import NumericAbort
from .metrics import CsvFormatError
from .recordio import RecordFormatError
from .source import TrainingDiverged
from .tensor import NonFiniteError

CONFIG_EXIT = 2
NUMERIC_EXIT = 3


def _add_config_flags(sub):
    sub.add_argument("--config", required=True, help="TOML experiment file")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--out", default=None, help="override the config out_dir")


def _load(args):
    return load_config(args.config, seed_override=args.seed, out_override=args.out)


def cmd_gen_dataset(args):
    cfg = _load(args)
    d = cfg.dataset
    for split, n, seed, path in (
        ("train", d.n_train, d.train_seed, cfg.paths.train_dataset),
        ("test", d.n_test, d.test_seed, cfg.paths.test_dataset),
    ):
        data = datasets.generate(n, n_classes=d.n_classes, image_size=d.image_size, seed=seed, noise=d.noise)
        datasets.save_dataset(data, path)
        print(f"wrote {split} split: {n} samples, {d.n_classes} classes -> {path}")
    return 0


def cmd_train_source(args):
    cfg = _load(args)
    if not os.path.exists(cfg.paths.train_dataset):
        raise ConfigError(f"paths.train_dataset: not found: {cfg.paths.train_dataset} (run gen-dataset first)")
    train = datasets.load_dataset(cfg.paths.train_dataset)
    graph = source.train_source(
        train,
        cfg.arch,
        epochs=cfg.train.epochs,
        lr=cfg.train.lr,
        seed=cfg.seed,
        batch_size=cfg.train.batch_size,
        momentum=cfg.train.momentum,
        log=print,
    )
    os.makedirs(os.path.dirname(cfg.paths.weights) or ".", exist_ok=True)
    from . import layers

    layers.save_weights(graph, cfg.paths.weights)
    acc = source.evaluate(graph, train)
    print(f"train accuracy {100 * acc:.2f}%  ->  {cfg.paths.weights}")
    if os.path.exists(cfg.paths.test_dataset):
        test = datasets.load_dataset(cfg.paths.test_dataset)
        print(f"clean test accuracy {100 * source.evaluate(graph, test):.2f}%")
    return 0


def cmd_extract_stats(args):
    cfg = _load(args)
    from . import engine, layers, runner

    graph = runner._load_artifact(lambda p: layers.load_weights(p, cfg.arch), cfg.paths.weights, "weights")
    graph.set_da_layers(engine.select_da_layers(len(graph.bn_layers()), cfg.method.da_layer_selection))
    train = runner._load_artifact(datasets.load_dataset, cfg.paths.train_dataset, "train_dataset")
    stats = source.compute_source_stats(graph, train)
    os.makedirs(os.path.dirname(cfg.paths.stats) or ".", exist_ok=True)
    source.save_stats(stats, cfg.paths.stats)
    print(f"reference statistics for DA layers {stats.layer_indices()} -> {cfg.paths.stats}")
    return 0


def cmd_run_tta(args):
    cfg = _load(args)
    from . import runner

    print(
        f"variant={cfg.method.variant} ordering={cfg.stream.ordering} "
        f"seed={cfg.seed} domains={[(s.kind, s.severity) for s, _ in cfg.stream.domain_sequence]}"
    )
    trace = runner.run_experiment(cfg, log=print)
    print(
        f"error {trace.error_percent():.2f}% over {len(trace.rows)} batches "
        f"({trace.n_samples()} samples), {trace.n_shifts()} shift events"
    )
    for domain_id, (kind, severity) in enumerate(trace.domains):
        print(f"  d{domain_id} {kind}@{severity}: {trace.domain_error_percent(domain_id):.2f}%")
    print(f"trace -> {cfg.out_dir}/batches.csv, domains.csv, summary.csv")
    if args.plots:
        from . import plots

        for path in plots.render_run(cfg.out_dir):
            print(f"figure -> {path}")
    return 0


def cmd_compare(args):
    from . import runner

    header, table = runner.compare_runs(args.runs)
    print(runner.render_table(header, table))
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    csv_path = runner.write_comparison(header, table, os.path.join(out_dir, "compare.csv"))
    print(f"table -> {csv_path}")
    if args.plots:
        from . import plots

        path = plots.render_comparison(header, table, os.path.join(out_dir, "compare.png"))
        print(f"figure -> {path}")
    return 0


def cmd_plot(args):
    from . import plots

    for path in plots.render_run(args.run, out_dir=args.out):
        print(f"figure -> {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="driftalign",
        description="Test-time adaptation by aligning feature statistics to a frozen source model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, doc in (
        ("gen-dataset", cmd_gen_dataset, "synthesize the train/test splits named in the config"),
        ("train-source", cmd_train_source, "train the source model and save its weights"),
        ("extract-stats", cmd_extract_stats, "compute and save the source reference statistics"),
        ("run-tta", cmd_run_tta, "run adaptation over the configured stream"),
    ):
        p = sub.add_parser(name, help=doc)
        _add_config_flags(p)
        if name == "run-tta":
            p.add_argument("--plots", action="store_true", help="also render figures")
        p.set_defaults(fn=fn)

    p = sub.add_parser("compare", help="tabulate several finished runs side by side")
    p.add_argument("runs", nargs="+", help="run directories containing summary.csv/domains.csv")
    p.add_argument("--out", default=None, help="directory for compare.csv (default: .)")
    p.add_argument("--plots", action="store_true", help="also render the comparison figure")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("plot", help="render figures for a finished run")
    p.add_argument("run", help="run directory containing batches.csv/domains.csv")
    p.add_argument("--out", default=None, help="directory for figures (default: the run directory)")
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CsvFormatError, RecordFormatError, UnknownCorruptionError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return CONFIG_EXIT
    except (NumericAbort, TrainingDiverged, NonFiniteError) as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return NUMERIC_EXIT


if __name__ == "__main__":
    sys.exit(main())
