"""Synthetic desk-scale image classification data.

Classes are oriented sinusoidal gratings: 5 orientations crossed with 2
spatial frequencies give 10 visually distinct textures. Per-sample jitter
(phase, small orientation wobble, amplitude, pixel noise) keeps the task
non-trivial while staying learnable by the reference CNN in seconds.
Pixels live in [0,1].
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import recordio

N_ORIENTATIONS = 5
N_FREQUENCIES = 2
FREQUENCIES = (2.0, 4.0)  # cycles per image side


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, S, S) float32 in [0,1]
    labels: np.ndarray  # (N,) int64

    def __len__(self):
        return len(self.labels)

    def validate(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("dataset: images (N,C,S,S) and labels (N,) must align")
        if len(self.labels) == 0:
            raise ValueError("dataset: empty")


def class_params(label):
    # label = orientation index + 5 * frequency index
    ori = (label % N_ORIENTATIONS) * np.pi / N_ORIENTATIONS
    freq = FREQUENCIES[label // N_ORIENTATIONS]
    return ori, freq


def _grating(size, ori, freq, phase, amplitude, channel_phases):
    ys, xs = np.mgrid[0:size, 0:size] / size
    axis = xs * np.cos(ori) + ys * np.sin(ori)
    img = np.empty((3, size, size), np.float64)
    for c in range(3):
        img[c] = 0.5 + 0.5 * amplitude * np.sin(2 * np.pi * freq * axis + phase + channel_phases[c])
    return img


def generate(n_samples, n_classes=10, image_size=16, seed=0, noise=0.02):
    """Balanced labeled dataset of jittered gratings."""
    if n_classes > N_ORIENTATIONS * N_FREQUENCIES:
        raise ValueError(f"at most {N_ORIENTATIONS * N_FREQUENCIES} grating classes available")
    if n_samples < n_classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_samples) % n_classes
    rng.shuffle(labels)
    images = np.empty((n_samples, 3, image_size, image_size), np.float32)
    for i, label in enumerate(labels):
        ori, freq = class_params(int(label))
        ori = ori + rng.uniform(-np.pi / 36, np.pi / 36)
        phase = rng.uniform(0, 2 * np.pi)
        amplitude = rng.uniform(0.7, 1.0)
        channel_phases = rng.uniform(-0.4, 0.4, size=3)
        img = _grating(image_size, ori, freq, phase, amplitude, channel_phases)
        img += rng.normal(scale=noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images=images, labels=labels.astype(np.int64))


def save_dataset(dataset, directory):
    """Write images as one raw tensor record plus a newline-separated label file."""
    dataset.validate()
    os.makedirs(directory, exist_ok=True)
    recordio.write_records(os.path.join(directory, "images.dat"), [("images", dataset.images)])
    with open(os.path.join(directory, "labels.txt"), "w", newline="\n") as fh:
        for label in dataset.labels:
            fh.write(f"{int(label)}\n")


def load_dataset(directory):
    records = recordio.read_records(os.path.join(directory, "images.dat"))
    if "images" not in records:
        raise recordio.RecordDimensionError(f"missing record 'images' in {directory}")
    images = records["images"]
    if images.ndim != 4:
        raise recordio.RecordDimensionError(f"record 'images' must be rank 4, got rank {images.ndim}")
    path = os.path.join(directory, "labels.txt")
    with open(path) as fh:
        try:
            labels = np.array([int(line) for line in fh if line.strip()], np.int64)
        except ValueError as e:
            raise recordio.RecordFormatError(f"bad label line in {path}: {e}") from None
    if len(labels) != len(images):
        raise recordio.RecordDimensionError(
            f"{directory}: {len(images)} images but {len(labels)} labels"
        )
    ds = Dataset(images=images, labels=labels)
    ds.validate()
    return ds
