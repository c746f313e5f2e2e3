"""Online adaptation: statistic blending, alignment and entropy losses,
affine-only optimization.

Variants: "source" (frozen model), "ttbn" (batch-statistic normalization,
no updates), "em_only", "da_only" and "da_em". The adaptive variants blend
normalization statistics once on the first batch, then update only the BN
affine parameters by SGD with momentum. This module never sees class
annotations; it consumes raw image batches and the frozen source-statistic
references.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from . import tensor as T

VARIANTS = ("source", "ttbn", "em_only", "da_only", "da_em")
DA_VARIANTS = ("da_only", "da_em")
EM_VARIANTS = ("em_only", "da_em")
DA_SELECTIONS = ("all", "low_half", "high_half")


class NumericAbort(RuntimeError):
    """A non-finite loss or gradient aborted an adaptation step."""


@dataclass
class MethodConfig:
    variant: str = "da_em"
    alpha: float = 0.9
    theta: float = 0.995
    lr: float = 1e-3
    momentum: float = 0.9
    da_layer_selection: str = "all"

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r} (know {VARIANTS})")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0,1], got {self.alpha}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0,1], got {self.theta}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0,1), got {self.momentum}")
        if self.da_layer_selection not in DA_SELECTIONS:
            raise ValueError(f"unknown da_layer_selection {self.da_layer_selection!r}")


@dataclass
class LossReport:
    l_da: float = 0.0
    l_em: float = 0.0
    l_final: float = 0.0
    n_confident: int = 0


def select_da_layers(n_bn, selection):
    if selection == "all":
        return list(range(n_bn))
    half = max(1, n_bn // 2)
    if selection == "low_half":
        return list(range(half))
    return list(range(n_bn - half, n_bn))


class AdaptationState:
    """Owns the model during a run plus the reset baseline.

    initial_affine_snapshot is taken right after the first-batch blend and
    never mutated; shift recovery restores it and zeroes the optimizer
    velocity buffers.
    """

    def __init__(self, model):
        self.model = model
        self.initial_affine_snapshot = None
        self.velocities = {}
        self.initialized = False


def init_adaptation(state, first_batch, alpha, variant="da_em"):
    """One-time setup on the first test batch.

    For the adaptive variants every BN layer's normalization statistics
    become alpha*population + (1-alpha)*first-batch moments, computed in a
    single forward pass with the blend applied layer by layer; statistics
    are frozen afterwards. The TTBN variant skips blending and runs on
    batch statistics permanently.
    """
    if state.initialized:
        raise RuntimeError("adaptation already initialized")
    if variant == "source":
        raise ValueError("the source variant performs no adaptation to initialize")
    images = first_batch if isinstance(first_batch, T.Tensor) else T.Tensor(first_batch)
    if images.data.shape[0] < 1:
        raise ValueError("first batch is empty")
    model = state.model
    model.set_training(False)
    model.set_trainable("affine")
    if variant == "ttbn":
        model.set_bn_mode(layers.BATCH_STATS)
    else:
        model.set_bn_mode(layers.FIXED_STATS)
        layers.blend_normalization_stats(model, images, alpha)
    state.initial_affine_snapshot = model.snapshot_affine()
    state.velocities = {}
    state.initialized = True


def da_loss(captured, ref):
    """Mean over DA layers of the per-channel L1 gap between captured and
    reference statistics: (1/C) * sum_j |m_j - m_bar_j| + |d2_j - d2_bar_j|."""
    layer_ids = captured.layer_indices()
    if layer_ids != ref.layer_indices():
        raise ValueError(f"captured layers {layer_ids} do not match reference {ref.layer_indices()}")
    total = None
    for i in layer_ids:
        m, d2 = captured.entries[i]
        ref_m, ref_d2 = ref.m_bar[i], ref.d2_bar[i]
        if m.data.shape != ref_m.shape:
            raise ValueError(f"da{i}: channel count {m.data.shape} != reference {ref_m.shape}")
        gap = T.add(
            T.tsum(T.absolute(T.sub(m, T.Tensor(ref_m)))),
            T.tsum(T.absolute(T.sub(d2, T.Tensor(ref_d2)))),
        )
        per_layer = T.mul(gap, 1.0 / m.data.shape[0])
        total = per_layer if total is None else T.add(total, per_layer)
    return T.mul(total, 1.0 / len(layer_ids))


def em_loss(logits, theta):
    """Entropy, summed over samples whose max softmax probability exceeds
    theta. Excluded samples contribute nothing to the value or gradient."""
    ls = T.log_softmax(logits)
    probs = np.exp(ls.data.astype(np.float64))
    mask = probs.max(axis=1) > theta
    n_confident = int(mask.sum())
    if n_confident == 0:
        return T.Tensor(np.zeros((), np.float32)), 0
    entropy = T.neg(T.tsum(T.mul(T.exp(ls), ls), axis=1))
    picked = T.mul(entropy, T.Tensor(mask.astype(np.float32)))
    return T.tsum(picked), n_confident


def _apply_sgd(state, params, grads, lr, momentum):
    for (name, p), g in zip(params, grads):
        v = state.velocities.get(name)
        v = g if v is None else momentum * v + g
        state.velocities[name] = v
        p.data = (p.data.astype(np.float64) - lr * v).astype(np.float32)


def adapt_step(state, batch_images, method, ref=None):
    """Predict on one batch, then update the affine parameters.

    Predictions come from the forward pass BEFORE the update, so batch t is
    scored by the model shaped by batches 1..t-1. Source and ttbn variants
    predict only. Returns (class indices, LossReport).
    """
    variant = method.variant
    images = batch_images if isinstance(batch_images, T.Tensor) else T.Tensor(batch_images)
    if variant in ("source", "ttbn"):
        with T.no_grad():
            logits, _ = state.model.forward(images)
        return np.argmax(logits.data, axis=1), LossReport()

    if not state.initialized:
        raise RuntimeError("call init_adaptation before adapt_step")
    want_da = variant in DA_VARIANTS
    if want_da and ref is None:
        raise ValueError(f"variant {variant!r} needs source reference statistics")

    try:
        logits, captured = state.model.forward(images, capture=want_da)
        predictions = np.argmax(logits.data, axis=1)
        report = LossReport()
        loss = None
        if want_da:
            da = da_loss(captured, ref)
            report.l_da = da.item()
            loss = da
        if variant in EM_VARIANTS:
            em, n_confident = em_loss(logits, method.theta)
            report.l_em = em.item()
            report.n_confident = n_confident
            loss = em if loss is None else T.add(loss, em)
        report.l_final = report.l_da + report.l_em

        params = state.model.affine_params()
        if loss.requires_grad:
            for _, p in params:
                p.grad = None
            loss.backward()
            grads = [np.zeros(p.data.shape) if p.grad is None else p.grad for _, p in params]
        else:
            grads = None  # nothing confident and nothing to align: skip the step
    except T.NonFiniteError as e:
        raise NumericAbort(f"non-finite value during adapt_step: {e}") from e

    if grads is not None:
        _apply_sgd(state, params, grads, method.lr, method.momentum)
    return predictions, report
