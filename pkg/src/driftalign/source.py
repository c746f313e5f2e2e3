"""Offline source stage: train the classifier, accumulate population BN
statistics, and extract the per-layer reference feature statistics that the
alignment loss compares against at test time."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers, recordio
from . import tensor as T


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during source training."""


@dataclass
class SourceStats:
    """Per-DA-layer reference means/variances plus per-BN-layer population stats."""

    m_bar: dict = field(default_factory=dict)  # bn index -> (C,) float32
    d2_bar: dict = field(default_factory=dict)
    mu_popu: list = field(default_factory=list)  # one (C,) array per BN layer
    sigma2_popu: list = field(default_factory=list)

    def layer_indices(self):
        return sorted(self.m_bar)

    def validate_against(self, graph):
        if self.layer_indices() != sorted(graph.da_layers):
            raise ValueError(
                f"stats cover DA layers {self.layer_indices()}, model expects {sorted(graph.da_layers)}"
            )
        bns = graph.bn_layers()
        if len(self.mu_popu) != len(bns):
            raise ValueError(f"stats hold {len(self.mu_popu)} BN layers, model has {len(bns)}")
        for i, bn in enumerate(bns):
            if self.mu_popu[i].shape != (bn.channels,):
                raise ValueError(f"bn{i}: stats channel count {self.mu_popu[i].shape} != {bn.channels}")
        for i in self.layer_indices():
            if np.any(self.d2_bar[i] < 0):
                raise ValueError(f"da{i}: negative reference variance")

    def restricted_to(self, indices):
        """View covering a subset of DA layers; population stats ride along."""
        missing = sorted(set(indices) - set(self.m_bar))
        if missing:
            raise ValueError(f"stats do not cover DA layers {missing}")
        return SourceStats(
            m_bar={i: self.m_bar[i] for i in indices},
            d2_bar={i: self.d2_bar[i] for i in indices},
            mu_popu=self.mu_popu,
            sigma2_popu=self.sigma2_popu,
        )


def _one_hot(labels, n_classes):
    out = np.zeros((len(labels), n_classes), np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy(logits, labels, n_classes):
    ls = T.log_softmax(logits)
    picked = T.tsum(T.mul(ls, T.Tensor(_one_hot(labels, n_classes))), axis=1)
    return T.neg(T.tmean(picked))


def _sgd_step(params, grads, velocities, lr, momentum):
    for (name, p), g in zip(params, grads):
        v = velocities.get(name)
        v = g if v is None else momentum * v + g
        velocities[name] = v
        p.data = (p.data.astype(np.float64) - lr * v).astype(np.float32)


def train_source(dataset, arch_spec, epochs, lr, seed, batch_size=128, momentum=0.9, log=None):
    """Cross-entropy training of the reference model; deterministic given seed.

    BN layers run on batch statistics and accumulate population statistics
    by EMA. The returned model is switched to inference state: FixedStats
    mode, normalization statistics set to the accumulated population values.
    """
    dataset.validate()
    if len(np.unique(dataset.labels)) < 2:
        raise ValueError("training needs at least 2 classes")
    graph = layers.build_model(arch_spec, seed=seed)
    graph.set_trainable("all")
    graph.set_bn_mode(layers.BATCH_STATS)
    graph.set_training(True)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    params = graph.all_params()
    velocities = {}
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, correct, loss_sum = 0, 0, 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue  # a 1-sample batch has degenerate batch statistics
            images = T.Tensor(dataset.images[idx])
            labels = dataset.labels[idx]
            try:
                logits, _ = graph.forward(images)
                loss = cross_entropy(logits, labels, arch_spec.n_classes)
                grads = T.gradients(loss, [p for _, p in params])
            except T.NonFiniteError as e:
                raise TrainingDiverged(f"epoch {epoch}: {e}") from e
            _sgd_step(params, grads, velocities, lr, momentum)
            loss_sum += loss.item() * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
            total += len(idx)
        if log is not None:
            log(f"epoch {epoch}: loss {loss_sum / total:.4f} acc {correct / total:.4f}")
    graph.set_training(False)
    graph.set_bn_mode(layers.FIXED_STATS)
    for bn in graph.bn_layers():
        bn.set_norm_stats(bn.mu_popu, bn.sigma2_popu)
    graph.set_trainable("affine")
    return graph


def evaluate(graph, dataset, batch_size=256):
    """Frozen-model accuracy; no statistics are touched."""
    correct = 0
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            images = T.Tensor(dataset.images[start : start + batch_size])
            logits, _ = graph.forward(images)
            preds = np.argmax(logits.data, axis=1)
            correct += int((preds == dataset.labels[start : start + batch_size]).sum())
    return correct / len(dataset)


def compute_source_stats(graph, dataset, batch_size=256):
    """Uniform average of per-sample spatial statistics over the source set.

    Runs with normalization in FixedStats mode on the population statistics,
    i.e. exactly the deployment-time forward pass.
    """
    dataset.validate()
    graph.set_bn_mode(layers.FIXED_STATS)
    graph.set_training(False)
    for bn in graph.bn_layers():
        bn.set_norm_stats(bn.mu_popu, bn.sigma2_popu)
    sums_m = {i: None for i in graph.da_layers}
    sums_d2 = {i: None for i in graph.da_layers}
    n = len(dataset)
    with T.no_grad():
        for start in range(0, n, batch_size):
            images = T.Tensor(dataset.images[start : start + batch_size])
            b = images.data.shape[0]
            _, capture = graph.forward(images, capture=True)
            for i in graph.da_layers:
                m, d2 = capture.entries[i]
                # capture holds batch means; weight by batch size for an
                # exact uniform average over samples
                add_m = m.data.astype(np.float64) * b
                add_d2 = d2.data.astype(np.float64) * b
                sums_m[i] = add_m if sums_m[i] is None else sums_m[i] + add_m
                sums_d2[i] = add_d2 if sums_d2[i] is None else sums_d2[i] + add_d2
    stats = SourceStats()
    for i in graph.da_layers:
        stats.m_bar[i] = (sums_m[i] / n).astype(np.float32)
        stats.d2_bar[i] = (sums_d2[i] / n).astype(np.float32)
    for bn in graph.bn_layers():
        stats.mu_popu.append(bn.mu_popu.copy())
        stats.sigma2_popu.append(bn.sigma2_popu.copy())
    return stats


def save_stats(stats, path):
    records = []
    for i in stats.layer_indices():
        records.append((f"da{i}.m_bar", stats.m_bar[i]))
        records.append((f"da{i}.d2_bar", stats.d2_bar[i]))
    for i in range(len(stats.mu_popu)):
        records.append((f"bn{i}.mu_popu", stats.mu_popu[i]))
        records.append((f"bn{i}.sigma2_popu", stats.sigma2_popu[i]))
    records.append(("meta.da_layers", np.asarray(stats.layer_indices(), np.float32)))
    recordio.write_records(path, records)


def load_stats(path, graph=None):
    records = recordio.read_records(path)
    da = records.get("meta.da_layers")
    if da is None:
        raise recordio.RecordDimensionError("missing record 'meta.da_layers'")
    stats = SourceStats()
    for v in da:
        i = int(v)
        for key in (f"da{i}.m_bar", f"da{i}.d2_bar"):
            if key not in records:
                raise recordio.RecordDimensionError(f"missing record {key!r}")
        stats.m_bar[i] = records[f"da{i}.m_bar"]
        stats.d2_bar[i] = records[f"da{i}.d2_bar"]
        if stats.m_bar[i].shape != stats.d2_bar[i].shape:
            raise recordio.RecordDimensionError(f"da{i}: mean/variance channel counts differ")
        if np.any(stats.d2_bar[i] < 0):
            raise recordio.RecordFormatError(f"da{i}.d2_bar has negative entries")
    i = 0
    while f"bn{i}.mu_popu" in records:
        stats.mu_popu.append(records[f"bn{i}.mu_popu"])
        stats.sigma2_popu.append(recordio.expect_shape(records, f"bn{i}.sigma2_popu", records[f"bn{i}.mu_popu"].shape))
        i += 1
    if graph is not None:
        try:
            stats.validate_against(graph)
        except ValueError as e:
            raise recordio.RecordDimensionError(str(e)) from None
    return stats
