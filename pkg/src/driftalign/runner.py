"""End-to-end experiment runs and run-to-run comparison.

``run_experiment`` wires a stream to the adaptation engine, optionally with
the shift detector in the loop, and writes the delimited trace. Each batch
is scored before the update it triggers; when the detector fires, recovery
(affine restore, velocity clear, re-anchored normalization stats) replaces
whatever that batch's update just wrote, and the batch row records the
event.

A numeric abort flushes the partial trace before propagating, so the rows
up to the failing batch survive for inspection.
"""

from __future__ import annotations

import os

from . import datasets, detector, engine, layers, metrics, source, streams
from .config import ConfigError
from .engine import AdaptationState, NumericAbort


def _load_artifact(loader, path, what):
    if not os.path.exists(path):
        raise ConfigError(f"paths.{what}: file not found: {path}")
    return loader(path)


def prepare_model(config):
    """Load weights plus, for alignment variants, the reference statistics."""
    graph = _load_artifact(
        lambda p: layers.load_weights(p, config.arch), config.paths.weights, "weights"
    )
    selection = engine.select_da_layers(len(graph.bn_layers()), config.method.da_layer_selection)
    graph.set_da_layers(selection)
    ref = None
    if config.method.variant in engine.DA_VARIANTS:
        stats = _load_artifact(source.load_stats, config.paths.stats, "stats")
        try:
            ref = stats.restricted_to(selection)
            ref.validate_against(graph)
        except ValueError as e:
            raise ConfigError(f"paths.stats: {e}") from None
    return graph, ref


def run_experiment(config, log=None, write=True):
    """Run one full stream; returns the MetricsTrace (CSVs land in out_dir)."""
    dataset = _load_artifact(datasets.load_dataset, config.paths.test_dataset, "test_dataset")
    try:
        batches = streams.make_stream(dataset, config.stream)
    except ValueError as e:
        raise ConfigError(f"stream: {e}") from None
    graph, ref = prepare_model(config)

    method = config.method
    state = AdaptationState(graph)
    det_state = None
    if config.detector is not None and method.variant not in ("source", "ttbn"):
        det_state = detector.DetectorState(config.detector)

    trace = metrics.MetricsTrace(
        variant=method.variant,
        ordering=config.stream.ordering,
        domains=[(spec.kind, spec.severity) for spec, _ in config.stream.domain_sequence],
    )

    if method.variant == "source":
        # pin deployment-time normalization regardless of saved norm slots
        graph.set_bn_mode(layers.FIXED_STATS)
        graph.set_training(False)
        for bn in graph.bn_layers():
            bn.set_norm_stats(bn.mu_popu, bn.sigma2_popu)

    try:
        for batch in batches:
            if not state.initialized and method.variant != "source":
                engine.init_adaptation(state, batch.images, method.alpha, method.variant)
            predictions, report = engine.adapt_step(state, batch.images, method, ref)
            shift = 0
            if det_state is not None:
                verdict = detector.observe(det_state, report.l_da)
                if verdict == detector.SHIFT_DETECTED:
                    detector.on_shift(state, batch.images, method.alpha, det_state)
                    shift = 1
            n_correct = int((predictions == batch.labels).sum())
            trace.add(
                metrics.BatchRow(
                    batch_index=batch.batch_index,
                    domain_id=batch.domain_id,
                    n_samples=len(batch.labels),
                    n_correct=n_correct,
                    l_da=report.l_da,
                    l_em=report.l_em,
                    l_final=report.l_final,
                    n_confident=report.n_confident,
                    shift_detected=shift,
                )
            )
            if log is not None and (batch.batch_index + 1) % 25 == 0:
                log(
                    f"  batch {batch.batch_index + 1}/{len(batches)}"
                    f"  err so far {trace.error_percent():.2f}%  l_da {report.l_da:.4f}"
                )
    except NumericAbort:
        if write:
            metrics.write_trace(trace, config.out_dir)
        raise
    if write:
        metrics.write_trace(trace, config.out_dir)
    return trace


def compare_runs(run_dirs):
    """Cross-run table: one row per run, one error column per domain plus Mean.

    All runs must have evaluated the same domain structure (id, kind,
    severity, sample count per domain), otherwise the error rates are not
    comparable and the mismatch is reported instead.
    """
    if len(run_dirs) < 2:
        raise ConfigError("compare: need at least two run directories")
    shapes = []
    rows = []
    for run_dir in run_dirs:
        summary = metrics.read_summary(run_dir)
        domains = metrics.read_domains(run_dir)
        shapes.append([(d["domain_id"], d["kind"], d["severity"], d["n_samples"]) for d in domains])
        rows.append((run_dir, summary, domains))
    for run_dir, shape in zip(run_dirs[1:], shapes[1:]):
        if shape != shapes[0]:
            raise ConfigError(
                f"compare: {run_dir} evaluated domains {shape}, "
                f"but {run_dirs[0]} evaluated {shapes[0]}"
            )

    header = ["run", "variant", "ordering"]
    header += [f"d{d['domain_id']}:{d['kind']}@{d['severity']}" for d in rows[0][2]]
    header += ["mean"]
    table = []
    for run_dir, summary, domains in rows:
        label = os.path.basename(os.path.normpath(run_dir)) or run_dir
        table.append(
            [label, summary["variant"], summary["ordering"]]
            + [d["error_rate"] for d in domains]
            + [summary["error_rate"]]
        )
    return header, table


def render_table(header, table):
    """Fixed-width text rendering with error columns shown as percentages."""
    cells = [header] + [
        [c if isinstance(c, str) else f"{c:.2f}" for c in row] for row in table
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_comparison(header, table, out_path):
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    metrics._write_csv(out_path, header, table)
    return out_path
