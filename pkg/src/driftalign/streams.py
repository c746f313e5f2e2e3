"""Deterministic evaluation streams: orderings, domains, batching.

A stream is a list of Batch objects built from a labeled dataset and a
StreamSpec. Orderings: "iid" is a global shuffle; "sorted" is a stable sort
by label (worst-case correlation); "dirichlet" splits the timeline into one
slot per batch and distributes each class across slots by a Dirichlet(delta)
draw, so small delta concentrates classes into few slots.

Labels ride along strictly for scoring: the adaptation path receives only
``batch.images``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import corruptions
from .corruptions import CorruptionSpec

ORDERINGS = ("iid", "dirichlet", "sorted")


@dataclass
class StreamSpec:
    ordering: str = "dirichlet"
    delta: float = 0.1
    batch_size: int = 64
    domain_sequence: list = field(default_factory=list)  # [(CorruptionSpec, budget), ...]
    seed: int = 0

    def validate(self, dataset_size=None):
        if self.ordering not in ORDERINGS:
            raise ValueError(f"unknown ordering {self.ordering!r} (know {ORDERINGS})")
        if self.ordering == "dirichlet" and not self.delta > 0:
            raise ValueError(f"dirichlet delta must be positive, got {self.delta}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be ≥ 1")
        if not self.domain_sequence:
            raise ValueError("domain_sequence must name at least one domain")
        for i, (spec, budget) in enumerate(self.domain_sequence):
            spec.validate()
            if budget < self.batch_size:
                raise ValueError(f"domain {i}: budget {budget} smaller than batch size {self.batch_size}")
            if dataset_size is not None and budget > dataset_size:
                raise ValueError(f"domain {i}: budget {budget} exceeds dataset size {dataset_size}")


@dataclass
class Batch:
    images: np.ndarray  # (b, C, H, W) float32 — the only field adaptation may see
    labels: np.ndarray  # (b,) int64, scoring only
    domain_id: int
    batch_index: int


def _dirichlet_order(labels, batch_size, delta, rng):
    # one slot per batch; each class is spread over slots by its own
    # Dirichlet draw, then slots are shuffled internally and concatenated
    n = len(labels)
    n_slots = int(np.ceil(n / batch_size))
    slots = [[] for _ in range(n_slots)]
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        rng.shuffle(members)
        proportions = rng.dirichlet(np.full(n_slots, delta))
        counts = rng.multinomial(len(members), proportions)
        start = 0
        for slot, count in enumerate(counts):
            slots[slot].extend(members[start : start + count])
            start += count
    order = []
    for slot in slots:
        slot = np.array(slot, dtype=np.int64)
        rng.shuffle(slot)
        order.extend(slot.tolist())
    return np.array(order, dtype=np.int64)


def _order_indices(labels, spec, rng):
    n = len(labels)
    if spec.ordering == "iid":
        order = np.arange(n)
        rng.shuffle(order)
        return order
    if spec.ordering == "sorted":
        return np.argsort(labels, kind="stable")
    return _dirichlet_order(labels, spec.batch_size, spec.delta, rng)


def make_stream(dataset, spec):
    """Materialize the full batch sequence for one experiment run."""
    dataset.validate()
    spec.validate(dataset_size=len(dataset))
    batches = []
    batch_index = 0
    for domain_id, (cspec, budget) in enumerate(spec.domain_sequence):
        rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), domain_id]))
        chosen = rng.permutation(len(dataset))[:budget]
        labels = dataset.labels[chosen]
        order = _order_indices(labels, spec, rng)
        images = corruptions.corrupt_batch(dataset.images[chosen][order], cspec)
        labels = labels[order]
        for start in range(0, budget, spec.batch_size):
            stop = min(start + spec.batch_size, budget)
            batches.append(
                Batch(
                    images=images[start:stop],
                    labels=labels[start:stop],
                    domain_id=domain_id,
                    batch_index=batch_index,
                )
            )
            batch_index += 1
    return batches


def shannon_label_entropy(batch):
    """Entropy (nats) of the batch's empirical label histogram."""
    labels = batch.labels if isinstance(batch, Batch) else np.asarray(batch)
    if len(labels) == 0:
        raise ValueError("entropy of an empty batch is undefined")
    counts = np.bincount(labels)
    p = counts[counts > 0] / len(labels)
    return float(-(p * np.log(p)).sum())


def mean_batch_entropy(batches):
    return float(np.mean([shannon_label_entropy(b) for b in batches]))


def mean_max_class_fraction(batches):
    fractions = []
    for b in batches:
        counts = np.bincount(b.labels)
        fractions.append(counts.max() / len(b.labels))
    return float(np.mean(fractions))
