"""Domain-shift detection by comparing short- and long-window means of the
alignment loss, plus the recovery action that re-anchors the model.

A shift is declared when the mean of the last p values exceeds tau times
the mean of the last q values (the long window contains the short one,
both include the current batch). Detection is gated by a warmup count, a
full long window, and a post-reset cooldown so the transient right after
recovery cannot re-trigger immediately.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import layers

NO_SHIFT = "no_shift"
SHIFT_DETECTED = "shift_detected"


@dataclass
class DetectorConfig:
    p: int = 4
    q: int = 32
    tau: float = 1.5
    warmup: int = 32
    cooldown: int = 32

    def validate(self):
        if self.p < 1:
            raise ValueError(f"short window p must be ≥ 1, got {self.p}")
        if self.q <= self.p:
            raise ValueError(f"long window q must exceed p, got p={self.p} q={self.q}")
        if not self.tau > 1.0:
            raise ValueError(f"tau must exceed 1, got {self.tau}")
        if self.warmup < self.q:
            raise ValueError(f"warmup must be ≥ q, got warmup={self.warmup} q={self.q}")
        if self.cooldown < 0:
            raise ValueError(f"cooldown must be ≥ 0, got {self.cooldown}")


class DetectorState:
    def __init__(self, config):
        config.validate()
        self.config = config
        self.buffer = deque(maxlen=config.q)
        self.n_observed = 0
        self.n_since_reset = None  # None until the first reset

    def reset(self):
        self.buffer.clear()
        self.n_since_reset = 0


def observe(state, l_da):
    """Feed one alignment-loss value; returns NO_SHIFT or SHIFT_DETECTED."""
    l_da = float(l_da)
    if not np.isfinite(l_da) or l_da < 0:
        raise ValueError(f"observe expects a finite non-negative loss, got {l_da}")
    cfg = state.config
    state.buffer.append(l_da)
    state.n_observed += 1
    if state.n_since_reset is not None:
        state.n_since_reset += 1
    if state.n_observed < cfg.warmup:
        return NO_SHIFT
    if state.n_since_reset is not None and state.n_since_reset <= cfg.cooldown:
        return NO_SHIFT
    if len(state.buffer) < cfg.q:
        return NO_SHIFT
    values = list(state.buffer)
    short_mean = sum(values[-cfg.p :]) / cfg.p
    long_mean = sum(values) / cfg.q
    if short_mean > cfg.tau * long_mean:
        return SHIFT_DETECTED
    return NO_SHIFT


def on_shift(adaptation_state, current_batch, alpha, detector_state=None):
    """Recover after a detected shift: restore the initial affine parameters,
    zero optimizer velocities, and re-blend normalization statistics treating
    the current batch as the first batch of a new domain. Clears the detector
    buffer and starts its cooldown when the detector state is provided."""
    model = adaptation_state.model
    model.restore_affine(adaptation_state.initial_affine_snapshot)
    adaptation_state.velocities = {}
    layers.blend_normalization_stats(model, current_batch, alpha)
    if detector_state is not None:
        detector_state.reset()
