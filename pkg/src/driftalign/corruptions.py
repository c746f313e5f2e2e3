"""Deterministic image corruptions with 5 severity levels per kind.

Severity tables are desk-scale stand-ins shaped after the common corruption
benchmarks. Randomized kinds derive their generator from
(seed, kind, severity, crc32 of the image bytes), so a given image is always
corrupted the same way regardless of its position in a stream.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

GAUSSIAN_SIGMA = (0.04, 0.08, 0.12, 0.18, 0.26)
IMPULSE_FRACTION = (0.01, 0.03, 0.06, 0.10, 0.17)
CONTRAST_FACTOR = (0.75, 0.6, 0.45, 0.3, 0.2)
BLUR_KERNEL = (1, 3, 3, 5, 5)
BLUR_PASSES = (1, 1, 2, 2, 3)
BRIGHTNESS_SHIFT = (0.05, 0.1, 0.15, 0.2, 0.3)

KINDS = ("gaussian_noise", "impulse_noise", "contrast", "box_blur", "brightness")


class UnknownCorruptionError(ValueError):
    pass


@dataclass
class CorruptionSpec:
    kind: str
    severity: int = 5
    seed: int = 0

    def validate(self):
        if self.kind not in KINDS:
            raise UnknownCorruptionError(f"unknown corruption kind {self.kind!r} (know {KINDS})")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be 1..5, got {self.severity}")


def _rng_for(image, spec):
    digest = zlib.crc32(np.ascontiguousarray(image, np.float32).tobytes())
    return np.random.default_rng(
        np.random.SeedSequence([int(spec.seed), KINDS.index(spec.kind), int(spec.severity), digest])
    )


def _box_blur(img, kernel, passes):
    if kernel == 1:
        return img
    pad = kernel // 2
    out = img
    for _ in range(passes):
        padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
        windows = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(1, 2))
        out = windows.mean(axis=(3, 4))
    return out


def corrupt(image, spec):
    """Corrupt one (C,H,W) image with pixel values in [0,1]; output is clipped back."""
    spec.validate()
    img = np.asarray(image, np.float32)
    s = spec.severity - 1
    if spec.kind == "gaussian_noise":
        rng = _rng_for(img, spec)
        out = img + rng.normal(scale=GAUSSIAN_SIGMA[s], size=img.shape)
    elif spec.kind == "impulse_noise":
        rng = _rng_for(img, spec)
        mask = rng.random(img.shape) < IMPULSE_FRACTION[s]
        salt = rng.integers(0, 2, size=img.shape).astype(np.float32)
        out = np.where(mask, salt, img)
    elif spec.kind == "contrast":
        out = (img - 0.5) * CONTRAST_FACTOR[s] + 0.5
    elif spec.kind == "box_blur":
        out = _box_blur(img.astype(np.float64), BLUR_KERNEL[s], BLUR_PASSES[s])
    elif spec.kind == "brightness":
        out = img + BRIGHTNESS_SHIFT[s]
    else:  # pragma: no cover - validate() already rejected it
        raise UnknownCorruptionError(spec.kind)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def corrupt_batch(images, spec):
    out = np.empty_like(images, dtype=np.float32)
    for i in range(len(images)):
        out[i] = corrupt(images[i], spec)
    return out
